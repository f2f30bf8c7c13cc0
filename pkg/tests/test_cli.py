import csv
import json

import pytest

from rbmonge.cli import main


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_test1(tmp_path):
    out = tmp_path / "t1"
    assert main(["solve", "--problem", "t1", "--grid", "15", "-o", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["max_error"] <= 1e-10
    assert report["converged"]
    assert "wall_time" in json.loads((out / "report.timing.json").read_text())
    rows = _rows(out / "solution.csv")
    assert len(rows) == 15 * 15
    assert list(rows[0]) == ["theta1", "theta2", "x1", "x2", "u", "du1", "du2"]
    assert (rows[0]["theta1"], rows[0]["theta2"], rows[1]["theta1"]) == ("1", "1", "2")
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["problem"] == "t1" and cfg["grid_n"] == [15, 15]
    assert cfg["alpha"] == 0 and cfg["beta"] == 0


def test_config_round_trip(tmp_path):
    a = tmp_path / "a"
    assert main(["solve", "--problem", "t2", "--grid", "15", "-o", str(a)]) == 0
    b = tmp_path / "b"
    assert main(["solve", "--config", str(a / "config.json"), "-o", str(b)]) == 0
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_json_format(tmp_path):
    assert main(["solve", "--problem", "t1", "--grid", "9", "--format", "json", "-o", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "solution.json").read_text())
    assert len(data) == 81 and set(data[0]) == {"theta1", "theta2", "x1", "x2", "u", "du1", "du2"}


def test_bad_mu_dimension(tmp_path, capsys):
    assert main(["solve", "--problem", "rb1", "--mu", "1,2", "--grid", "9", "-o", str(tmp_path)]) == 1
    assert "mu" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "t1", "gird": 31}))
    assert main(["solve", "--config", str(cfg), "-o", str(tmp_path)]) == 1
    assert "gird" in capsys.readouterr().err


def test_unknown_problem(tmp_path):
    assert main(["solve", "--problem", "nope", "-o", str(tmp_path)]) == 1


def test_outer_cap_exit_code(tmp_path):
    assert main(["solve", "--problem", "t4", "--grid", "15", "--K", "1", "-o", str(tmp_path)]) == 2
    assert (tmp_path / "solution.csv").exists()


def test_dirichlet(tmp_path):
    assert main(["dirichlet", "--problem", "d_cinf", "--grid", "15", "-o", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["max_error"] == pytest.approx(8.98e-3, rel=1.0)


def test_convergence(tmp_path):
    assert main(["convergence", "--problem", "t1", "--grids", "9,15", "-o", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "convergence.csv")
    assert [r["grid_n"] for r in rows] == ["9", "15"]
    assert rows[0]["order"] == ""
    assert all(float(r["max_error"]) <= 1e-10 for r in rows)
    assert _rows(tmp_path / "convergence.timing.csv")[0].keys() == {"grid_n", "wall_time"}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--problem", "rb1", "--grid", "15", "--nmax", "2", "--xi", "5:3:20", "--seed", "1", "-o", str(out)])
    assert code == 0
    return out


def test_train_outputs(trained):
    assert (trained / "rb1.model").exists()
    hist = _rows(trained / "history.csv")
    assert list(hist[0]) == ["round", "selected_mu", "indicator_max"]
    assert [h["round"] for h in hist] == ["1", "2"]
    assert list(_rows(trained / "history.timing.csv")[0]) == ["round", "truth_time", "sweep_time"]


def test_train_is_byte_reproducible(trained, tmp_path):
    code = main(["train", "--problem", "rb1", "--grid", "15", "--nmax", "2", "--xi", "5:3:20", "--seed", "1", "-o", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "rb1.model").read_bytes() == (trained / "rb1.model").read_bytes()
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_train_base_case(tmp_path):
    assert main(["train", "--problem", "rb1", "--grid", "9", "--nmax", "1", "--xi", "5:5:20", "-o", str(tmp_path)]) == 0
    assert len(_rows(tmp_path / "history.csv")) == 1


def test_online(trained, tmp_path):
    model = str(trained / "rb1.model")
    assert main(["online", "--model", model, "--mu", "8", "--mu", "25", "-o", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "results.csv")
    assert list(rows[0]) == ["mu1", "sigma", "K_n", "indicator", "converged"]
    assert [r["mu1"] for r in rows] == ["8", "25"]
    assert all(float(r["indicator"]) >= 0 for r in rows)
    assert len(_rows(tmp_path / "results.timing.csv")) == 2


def test_online_empty_mu_list(trained, tmp_path):
    assert main(["online", "--model", str(trained / "rb1.model"), "-o", str(tmp_path)]) == 0
    assert (tmp_path / "results.csv").read_text() == "mu1,sigma,K_n,indicator,converged\n"


def test_online_mismatch(trained, tmp_path):
    model = str(trained / "rb1.model")
    assert main(["online", "--model", model, "--problem", "rb2", "--mu", "0.5,0.5", "-o", str(tmp_path)]) == 5
    assert main(["online", "--model", model, "--mu", "1,2", "-o", str(tmp_path)]) == 5
    assert main(["online", "--model", model, "--grid", "31", "--mu", "8", "-o", str(tmp_path)]) == 5


def test_online_missing_or_corrupt_model(trained, tmp_path):
    assert main(["online", "--model", str(tmp_path / "none.model"), "-o", str(tmp_path)]) == 1
    bad = tmp_path / "bad.model"
    bad.write_bytes((trained / "rb1.model").read_bytes()[:-8])
    assert main(["online", "--model", str(bad), "--mu", "8", "-o", str(tmp_path)]) == 1


def test_sweep_and_bench(trained, tmp_path):
    model = str(trained / "rb1.model")
    assert main(["sweep", "--model", model, "--xi-test", "6:6:18", "-o", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert [r["n_basis"] for r in rows] == ["1", "2"]
    assert float(rows[1]["E"]) < float(rows[0]["E"])
    code = main(["bench", "--model", model, "--nrun", "20", "--offline-time", "29.45", "--online-time", "0.0091", "--fdm-time", "3.18", "-o", str(tmp_path)])
    assert code == 0
    assert json.loads((tmp_path / "bench.json").read_text())["break_even"] == 10
    assert len(_rows(tmp_path / "bench.csv")) == 20

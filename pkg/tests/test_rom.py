import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmonge.errors import ChecksumMismatch, FormatVersionMismatch, ModelMismatch, SingularInterpolation, ZeroVector
from rbmonge.problem import builtin, parameter_set
from rbmonge.rom import (
    MAGIC,
    OnlineConfig,
    ReducedModel,
    TrainConfig,
    combine,
    eim_point,
    full_residual,
    indicator,
    interp_orthogonalize,
    load_model,
    online_solve,
    reduced_residual,
    save_model,
    train,
)
from rbmonge.stencil import phi_layout
from rbmonge.truth import compute_phi, grid_for, solve_transport


def test_eim_point_examples():
    assert eim_point([0.1, -0.7, 0.3]) == 1
    assert eim_point([0.5, -0.5, 0.2]) == 0  # tie goes to the lowest index
    assert eim_point([0.1, -0.7, 0.3], exclude=[1]) == 2
    with pytest.raises(ZeroVector):
        eim_point(np.zeros(4))
    with pytest.raises(ZeroVector):
        eim_point([0.0, 1.0], exclude=[1])


def test_interp_orthogonalize_against_lstsq(rng):
    B = rng.standard_normal((20, 3))
    v = rng.standard_normal(20)
    pts = [2, 7, 11]
    out = interp_orthogonalize(v, B, pts)
    # oracle: coefficients from a least-squares fit on the interpolation rows
    a, *_ = np.linalg.lstsq(B[pts], v[pts], rcond=None)
    np.testing.assert_allclose(out, v - B @ a, atol=1e-12)
    np.testing.assert_allclose(out[pts], 0, atol=1e-12)
    np.testing.assert_array_equal(interp_orthogonalize(v, np.zeros((20, 0)), []), v)


def test_interp_orthogonalize_singular():
    B = np.ones((5, 2))
    with pytest.raises(SingularInterpolation) as exc:
        interp_orthogonalize(np.arange(5.0), B, [0, 1], round_number=4)
    assert exc.value.round_number == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_combine_is_row_independent(k, rows, seed):
    r = np.random.default_rng(seed)
    W = r.standard_normal((rows + 5, k))
    c = r.standard_normal(k)
    full = combine(W, c)
    sel = r.choice(W.shape[0], rows, replace=False)
    np.testing.assert_array_equal(combine(np.ascontiguousarray(W[sel]), c), full[sel])
    np.testing.assert_allclose(full, W @ c, rtol=1e-13, atol=1e-13)


def test_model_shape(small_model):
    m = small_model
    assert m.n == 3 and m.m == 6
    assert len(m.solution_points) == 4 and len(m.residual_points) == 2
    assert len(set(m.collocation_points)) == 6
    assert m.basis.shape == (m.grid.size, 3)
    assert m.residual_basis.shape == (m.grid.size, 2)
    assert len(m.selected_params) == 3
    assert len({tuple(p) for p in m.selected_params}) == 3


def test_interpolatory_structure(small_model):
    m = small_model
    P = m.solution_points[1:]
    for j in range(m.n):
        assert m.basis[P[j], j] == pytest.approx(1.0, abs=1e-12)
        for i in range(j):
            assert abs(m.basis[P[i], j]) <= 1e-12
    for j, xr in enumerate(m.residual_points):
        assert m.residual_basis[xr, j] == pytest.approx(1.0, abs=1e-12)
        for i in range(j):
            assert abs(m.residual_basis[m.residual_points[i], j]) <= 1e-12


def test_restricted_rows_cover_collocation(small_model):
    m = small_model
    assert set(m.collocation_points) <= set(m.restricted_rows.tolist())
    assert m.restricted_rows.size < m.grid.size
    np.testing.assert_array_equal(m.restricted_basis, m.basis[m.restricted_rows])


def test_truncate_is_nested(small_model):
    m = small_model
    sub = m.truncate(2)
    assert sub.solution_points == m.solution_points[:3]
    assert sub.residual_points == m.residual_points[:1]
    np.testing.assert_array_equal(sub.basis, m.basis[:, :2])
    np.testing.assert_array_equal(sub.restricted_basis, m.basis[sub.restricted_rows, :2])
    with pytest.raises(ValueError):
        m.truncate(4)


def test_save_load_bitwise(small_model, tmp_path):
    path = tmp_path / "m.rbm"
    save_model(small_model, path)
    back = load_model(path)
    for name in ("basis", "residual_basis", "restricted_basis", "c_init", "restricted_rows"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small_model, name))
    assert back.solution_points == small_model.solution_points
    assert back.residual_points == small_model.residual_points
    assert back.sigma_init == small_model.sigma_init
    for a, b in zip(back.selected_params, small_model.selected_params):
        np.testing.assert_array_equal(a, b)
    save_model(back, tmp_path / "again.rbm")
    assert (tmp_path / "again.rbm").read_bytes() == path.read_bytes()
    assert (tmp_path / "m.rbm.timing.json").exists()


def test_load_rejects_damaged_files(small_model, tmp_path):
    path = tmp_path / "m.rbm"
    save_model(small_model, path)
    data = path.read_bytes()
    (tmp_path / "short.rbm").write_bytes(data[:-16])
    with pytest.raises(ChecksumMismatch):
        load_model(tmp_path / "short.rbm")
    flipped = bytearray(data)
    flipped[-3] ^= 0xFF
    (tmp_path / "flip.rbm").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumMismatch):
        load_model(tmp_path / "flip.rbm")
    (tmp_path / "junk.rbm").write_bytes(b"not a model")
    with pytest.raises(ChecksumMismatch):
        load_model(tmp_path / "junk.rbm")


def test_load_rejects_other_format_version(small_model, tmp_path):
    path = tmp_path / "m.rbm"
    save_model(small_model, path)
    data = path.read_bytes()
    off = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    head = json.loads(data[off + 8 : off + 8 + hlen])
    head["format_version"] = 99
    text = json.dumps(head).encode()
    (tmp_path / "v99.rbm").write_bytes(MAGIC + struct.pack("<Q", len(text)) + text + data[off + 8 + hlen :])
    with pytest.raises(FormatVersionMismatch):
        load_model(tmp_path / "v99.rbm")


def test_restricted_only_is_bitwise_identical(small_model, rb1, tmp_path):
    path = tmp_path / "m.rbm"
    save_model(small_model, path)
    lean = load_model(path, restricted_only=True)
    assert lean.basis is None
    for mu in ([6.3], [17.9]):
        a = online_solve(small_model, mu, rb1)
        b = online_solve(lean, mu, rb1)
        assert b.c.tobytes() == a.c.tobytes()
        assert b.sigma == a.sigma and b.indicator == a.indicator and b.iterations == a.iterations


def test_reproduces_selected_snapshots(small_model, rb1):
    for mu in small_model.selected_params:
        rs = online_solve(small_model, mu, rb1)
        truth = solve_transport(rb1, mu, small_model.grid).u.values
        err = np.abs(rs.full(small_model) - truth).max() / np.abs(truth).max()
        assert rs.converged
        assert err <= 1e-6
        assert rs.indicator <= 1e-6


def test_indicator_equals_subsampled_full_residual(small_model, rb1, rng):
    g = small_model.grid
    lay = phi_layout(g)
    for _ in range(10):
        sub = small_model.truncate(int(rng.integers(1, small_model.n + 1)))
        mu = [rng.uniform(5, 20)]
        c = sub.c_init * (1 + 0.1 * rng.standard_normal(sub.n)) + np.r_[0, 0.05 * rng.standard_normal(sub.n - 1)]
        sigma = rng.uniform(0.5, 2.0)
        phi = compute_phi(rb1, g, combine(sub.basis, c + 1e-3 * rng.standard_normal(sub.n))).values
        assert phi.size == lay.size
        red = reduced_residual(sub, mu, rb1, c, sigma, phi[sub.collocation.slots])
        full = full_residual(rb1, g, mu, combine(sub.basis, c), sigma, phi, sub.stab)[sub.collocation_points]
        np.testing.assert_allclose(red, full, rtol=0, atol=1e-14)


def test_indicator_function_matches_solution(small_model, rb1):
    rs = online_solve(small_model, [11.0], rb1)
    assert indicator(small_model, [11.0], rs, prob=rb1) == rs.indicator
    assert indicator(small_model, [11.0], rs) == rs.indicator


def test_greedy_information_grows(small_model):
    hist = small_model.history
    assert [h["round"] for h in hist] == [1, 2, 3]
    assert np.isnan(hist[0]["indicator_max"])
    # one basis function and two points give a square system: the round-2 sweep residual is round-off
    assert hist[1]["indicator_max"] < 1e-10 < hist[2]["indicator_max"]
    prev = None
    for n in range(1, small_model.n + 1):
        sub = small_model.truncate(n)
        cur = (set(sub.solution_points), set(sub.residual_points), {tuple(p) for p in sub.selected_params})
        if prev is not None:
            assert all(a < b for a, b in zip(prev, cur))
        prev = cur


def test_base_case_single_snapshot(rb1):
    g = grid_for(rb1, 15)
    m = train(rb1, g, TrainConfig(1, parameter_set(["5:5:20"]), seed=0))
    assert m.n == 1 and m.residual_points == [] and m.m == 2
    u1 = solve_transport(rb1, m.selected_params[0], g).u.values
    np.testing.assert_allclose(m.basis[:, 0] * m.c_init[0], u1, rtol=0, atol=1e-14 * np.abs(u1).max())
    rs = online_solve(m, m.selected_params[0], rb1)
    np.testing.assert_allclose(rs.full(m), u1, atol=1e-8 * np.abs(u1).max())


def test_training_is_deterministic(rb1, tmp_path):
    g = grid_for(rb1, 15)
    cfg = lambda: TrainConfig(2, parameter_set(["5:3:20"]), seed=7)
    save_model(train(rb1, g, cfg()), tmp_path / "a.rbm")
    save_model(train(rb1, g, cfg()), tmp_path / "b.rbm")
    assert (tmp_path / "a.rbm").read_bytes() == (tmp_path / "b.rbm").read_bytes()


def test_model_mismatch(small_model):
    with pytest.raises(ModelMismatch):
        online_solve(small_model, [1.0], builtin("rb2"))
    with pytest.raises(ModelMismatch):
        online_solve(small_model, [1.0, 2.0], builtin("rb1"))


def test_online_cap_reports_not_converged(small_model, rb1):
    rs = online_solve(small_model, [12.0], rb1, OnlineConfig(K=1))
    assert rs.iterations == 1
    assert not rs.converged


def test_model_validation(small_model):
    m = small_model
    with pytest.raises(ValueError):
        ReducedModel(m.problem_name, m.grid, m.stab, m.basis, m.solution_points, m.residual_points[:1] * 2, m.selected_params)
    with pytest.raises(ValueError):
        TrainConfig(0, [[5.0]])
    with pytest.raises(ValueError):
        TrainConfig(2, [])

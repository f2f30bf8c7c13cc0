"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The summary lines are collected in ``RESULTS`` and echoed by the terminal
summary hook in ``conftest.py``.
"""
import math
import statistics
import time

import numpy as np
import pytest

from rbmonge.bench import convergence_study, median_time, rb_sweep, truth_cache
from rbmonge.cli import main
from rbmonge.problem import builtin, parameter_set
from rbmonge.rom import (
    TrainConfig,
    combine,
    full_residual,
    load_model,
    online_solve,
    reduced_residual,
    save_model,
    train,
)
from rbmonge.truth import compute_phi, grid_for, solve_transport

RESULTS = {}


def record(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def within(value, ref, factor=3.0):
    return ref / factor <= value <= ref * factor


# -- shared trained models --------------------------------------------------


@pytest.fixture(scope="module")
def rb1_63():
    prob = builtin("rb1")
    t0 = time.perf_counter()
    model = train(prob, grid_for(prob, 63), TrainConfig(7, parameter_set(["5:0.2:20"]), seed=0))
    return model, time.perf_counter() - t0


def _rb1_coarse(n):
    prob = builtin("rb1")
    return train(prob, grid_for(prob, n), TrainConfig(7, parameter_set(["5:1:20"]), seed=0))


@pytest.fixture(scope="module")
def rb1_127():
    return _rb1_coarse(127)


@pytest.fixture(scope="module")
def rb1_63_coarse():
    # same training set and seed as the 127^2 model, so only the grid differs
    return _rb1_coarse(63)


# -- full-order solver ------------------------------------------------------


def test_criterion_01_test1_exactness():
    prob = builtin("t1")
    t0 = time.perf_counter()
    rows = convergence_study(prob, [], [31])
    wall = time.perf_counter() - t0
    err = rows[0].max_error
    record(1, err <= 1e-10 and wall < 5.0, f"Test 1 at 31^2: map error {err:.2e} (<= 1e-10), {wall:.2f} s (< 5 s)")


def test_criterion_02_test2_order():
    ref = (2.72e-3, 7.47e-4, 2.24e-4)
    t0 = time.perf_counter()
    rows = convergence_study(builtin("t2"), [], [15, 31, 65])
    wall = time.perf_counter() - t0
    errs = [r.max_error for r in rows]
    ords = [r.order for r in rows[1:]]
    ok = all(within(e, r) for e, r in zip(errs, ref)) and all(1.5 <= o <= 2.3 for o in ords) and wall < 30
    record(2, ok, f"Test 2 errors {', '.join(f'{e:.3e}' for e in errs)}, orders {', '.join(f'{o:.2f}' for o in ords)}, {wall:.1f} s")


def test_criterion_03_test4_outer_iterations():
    prob = builtin("t4")
    assert prob.stab.alpha == 10
    its = [solve_transport(prob, [], grid_for(prob, n)).outer_iters for n in (31, 65)]
    record(3, all(15 <= k <= 30 for k in its), f"Test 4 (alpha=10) outer iterations at 31^2, 65^2: {its} (in [15, 30])")


def test_criterion_04_dirichlet():
    ref = (8.98e-3, 2.38e-3, 5.97e-4)
    smooth = convergence_study(builtin("d_cinf"), [], [15, 31, 65])
    errs = [r.max_error for r in smooth]
    ords = [r.order for r in smooth[1:]]
    ok_smooth = all(within(e, r) for e, r in zip(errs, ref)) and all(1.6 <= o <= 2.2 for o in ords)
    rough = convergence_study(builtin("d_c0"), [], [31, 65, 127])
    rerrs = [r.max_error for r in rough]
    rords = [r.order for r in rough[1:]]
    ok_rough = all(b < a for a, b in zip(rerrs, rerrs[1:])) and all(o >= 0.5 for o in rords)
    record(
        4, ok_smooth and ok_rough,
        f"C-inf errors {', '.join(f'{e:.3e}' for e in errs)} orders {', '.join(f'{o:.2f}' for o in ords)}; "
        f"C0 errors {', '.join(f'{e:.3e}' for e in rerrs)} orders {', '.join(f'{o:.2f}' for o in rords)}",
    )


def test_criterion_05_scheme_identities():
    import test_stencil as ts

    checks = {
        "quadratic exactness": lambda: ts.test_quadratic_exactness(),
        "central gradient": lambda: ts.test_central_gradient_operator_exact_on_quadratics(np.random.default_rng(1)),
        "stabilization identities": lambda: ts.test_stabilization_identities(),
        "Jacobian vs finite differences": lambda: [
            ts.test_jacobian_rows_match_finite_differences(name, theta, np.random.default_rng(12345))
            for name in ("t1", "t3", "rb5")
            for theta in ((5, 5), (1, 5), (5, 9), (1, 1), (9, 1), (2, 2), (9, 9))
        ],
    }
    failed = []
    for label, fn in checks.items():
        try:
            fn()
        except AssertionError:
            failed.append(label)
    record(5, not failed, "scheme identities " + ("all hold" if not failed else "failed: " + ", ".join(failed)))


def test_criterion_06_projection_oracle():
    import test_problem as tp

    failed = []
    for name in sorted(tp.SHAPES):
        try:
            tp.test_projection_oracle(name)
        except AssertionError:
            failed.append(name)
    record(6, not failed, f"projection oracle over {', '.join(sorted(tp.SHAPES))}" + ("" if not failed else f" failed for {failed}"))


# -- reduced model ----------------------------------------------------------


def test_criterion_07_reproduction(rb1_63):
    model, _ = rb1_63
    prob = builtin("rb1")
    worst_err = worst_ind = 0.0
    for mu in model.selected_params:
        rs = online_solve(model, mu, prob)
        truth = solve_transport(prob, mu, model.grid).u.values
        worst_err = max(worst_err, np.abs(rs.full(model) - truth).max() / np.abs(truth).max())
        worst_ind = max(worst_ind, rs.indicator)
    record(7, worst_err <= 1e-6 and worst_ind <= 1e-6, f"rb1 63^2 N=7 at selected mu: rel error {worst_err:.2e}, indicator {worst_ind:.2e} (<= 1e-6)")


def test_criterion_08_decay(rb1_63):
    model, wall = rb1_63
    prob = builtin("rb1")
    xi_test = parameter_set(["5.1:0.2:19.9"])
    rows = rb_sweep(model, xi_test, prob, truth_cache(prob, model.grid, xi_test))
    E = [r.E for r in rows]
    ok = E[6] / E[0] <= 1e-3 and E[3] <= E[0] / 10 and wall < 900 and all(r.failures == 0 for r in rows)
    record(8, ok, f"E(n) = {', '.join(f'{e:.2e}' for e in E)}; E7/E1 = {E[6] / E[0]:.1e}, E4/E1 = {E[3] / E[0]:.1e}; training {wall:.0f} s")


def test_criterion_09_online_cost(rb1_63_coarse, rb1_127, tmp_path):
    prob = builtin("rb1")
    save_model(rb1_127, tmp_path / "m.rbm")
    lean = load_model(tmp_path / "m.rbm", restricted_only=True)
    params = ([5.7], [12.3], [19.1])
    bitwise = True
    for mu in params:
        a, b = online_solve(rb1_127, mu, prob), online_solve(lean, mu, prob)
        bitwise &= a.c.tobytes() == b.c.tobytes() and a.sigma == b.sigma and a.indicator == b.indicator

    def batch(model):
        t0 = time.perf_counter()
        for mu in params:
            online_solve(model, mu, prob)
        return (time.perf_counter() - t0) / len(params)

    # interleaved repetitions so that load spikes hit both models alike
    pairs = [(batch(lean), batch(rb1_63_coarse)) for _ in range(7)]
    t_127 = statistics.median(p[0] for p in pairs)
    t_63 = statistics.median(p[1] for p in pairs)
    t_full = statistics.median(median_time(lambda: solve_transport(prob, mu, rb1_127.grid), 1) for mu in params)
    speedup, ratio = t_full / t_127, t_127 / t_63
    ok = bitwise and speedup >= 20 and ratio <= 2
    record(9, ok, f"restricted-only bitwise {bitwise}; 127^2 speedup {speedup:.0f}x (>= 20); online 127^2/63^2 ratio {ratio:.2f} (<= 2)")


def test_criterion_10_indicator_equivalence(rb1_63, rb1_127):
    prob = builtin("rb1")
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        model = (rb1_63[0], rb1_127)[int(r.integers(2))].truncate(int(r.integers(1, 8)))
        mu = [r.uniform(5, 20)]
        c = model.c_init * (1 + 0.1 * r.standard_normal(model.n)) + np.r_[0, 0.05 * r.standard_normal(model.n - 1)]
        sigma = r.uniform(0.5, 2.0)
        phi = compute_phi(prob, model.grid, combine(model.basis, c + 1e-3 * r.standard_normal(model.n))).values
        red = reduced_residual(model, mu, prob, c, sigma, phi[model.collocation.slots])
        full = full_residual(prob, model.grid, mu, combine(model.basis, c), sigma, phi, model.stab)[model.collocation_points]
        worst = max(worst, float(np.abs(red - full).max()))
        assert math.isfinite(worst)
    record(10, worst <= 1e-14, f"restricted vs full residual at X_m over 50 random triples: max difference {worst:.1e} (<= 1e-14)")


def test_criterion_11_persistence_and_determinism(rb1_63, tmp_path):
    model, _ = rb1_63
    save_model(model, tmp_path / "m.rbm")
    back = load_model(tmp_path / "m.rbm")
    roundtrip = all(
        getattr(back, k).tobytes() == getattr(model, k).tobytes()
        for k in ("basis", "residual_basis", "restricted_basis", "restricted_rows", "c_init")
    ) and back.solution_points == model.solution_points and back.residual_points == model.residual_points
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["--problem", "rb1", "-o", str(out)]
        assert main(["train", *args, "--grid", "31", "--nmax", "3", "--xi", "5:1.5:20", "--seed", "3"]) == 0
        assert main(["online", "-o", str(out), "--model", str(out / "rb1.model"), "--mu", "7.5", "--mu", "16"]) == 0
        assert main(["sweep", "-o", str(out), "--model", str(out / "rb1.model"), "--xi-test", "6:4:18"]) == 0
        outputs[run] = {f: (out / f).read_bytes() for f in ("rb1.model", "history.csv", "results.csv", "sweep.csv")}
    same = [f for f in outputs["a"] if outputs["a"][f] == outputs["b"][f]]
    ok = roundtrip and len(same) == 4
    record(11, ok, f"save/load bitwise {roundtrip}; byte-identical reruns: {', '.join(same)}")

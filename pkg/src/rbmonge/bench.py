"""Error metrics, convergence studies, reduced-basis sweeps and timing tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import GridMismatch, NewtonDiverged, OnlineDiverged, OuterNotConverged
from .grid import Grid
from .problem import DirichletProblem
from .rom import OnlineConfig, ReducedModel, online_solve
from .stencil import gradient_operator
from .truth import NewtonConfig, TransportConfig, grid_for, solve_dirichlet, solve_transport

log = logging.getLogger(__name__)

EXACT_REGIME = 1e-10


def _values(u):
    return np.asarray(getattr(u, "values", u), dtype=float)


def discrete_gradient(u, grid: Grid) -> np.ndarray:
    g1, g2 = gradient_operator(grid)
    u = _values(u)
    if u.size != grid.size:
        raise GridMismatch(f"vector of length {u.size} on a grid with {grid.size} points")
    return np.column_stack([g1 @ u, g2 @ u])


def map_error(u_truth, u_rb, grid: Grid) -> float:
    """Max-norm of the difference of discrete gradients over all grid points."""
    a, b = _values(u_truth), _values(u_rb)
    if a.shape != b.shape:
        raise GridMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(discrete_gradient(a - b, grid))))


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    grid_n: int
    max_error: float
    order: Optional[float] = None
    wall_time: float = 0.0
    outer_iters: int = 0
    status: str = "ok"

    @property
    def exact_regime(self) -> bool:
        return self.max_error <= EXACT_REGIME


def _solve(prob, mu, grid, tcfg, ncfg):
    if isinstance(prob, DirichletProblem):
        return solve_dirichlet(prob, mu, grid, ncfg)
    return solve_transport(prob, mu, grid, tcfg, ncfg)


def _error_vs_exact(prob, mu, grid, sol) -> Optional[float]:
    u = sol.u.values
    if isinstance(prob, DirichletProblem):
        if prob.exact_solution is None:
            return None
        return float(np.max(np.abs(u - prob.exact_solution(grid.points, prob.check_mu(mu)))))
    if prob.exact_map is None:
        return None
    return float(np.max(np.abs(discrete_gradient(u, grid) - prob.exact_map(grid.points, prob.check_mu(mu)))))


def _error_vs_reference(prob, grid, sol, ref_grid, ref_sol) -> float:
    idx = ref_grid.restriction_indices(grid)
    if isinstance(prob, DirichletProblem):
        return float(np.max(np.abs(sol.u.values - ref_sol.u.values[idx])))
    d = discrete_gradient(sol.u, grid) - discrete_gradient(ref_sol.u, ref_grid)[idx]
    return float(np.max(np.abs(d)))


def orders(errors: Sequence[float]) -> list:
    """``log2(e_prev / e_cur)`` between consecutive entries; the first is ``None``."""
    out = [None]
    for prev, cur in zip(errors[:-1], errors[1:]):
        ok = prev is not None and cur is not None and prev > 0 and cur > 0 and np.isfinite(prev) and np.isfinite(cur)
        out.append(math.log2(prev / cur) if ok else None)
    return out


def convergence_study(
    prob, mu, grid_ns: Sequence[int], tcfg: Optional[TransportConfig] = None, ncfg: Optional[NewtonConfig] = None
) -> list[ConvergenceRow]:
    """Error per grid against the exact solution, else against the finest grid."""
    grid_ns = [int(n) for n in grid_ns]
    rows, sols = [], {}
    for n in grid_ns:
        grid = grid_for(prob, n)
        t0 = time.perf_counter()
        try:
            sol = _solve(prob, mu, grid, tcfg, ncfg)
            status = "ok"
        except OuterNotConverged as exc:
            sol, status = exc.result, "outer_not_converged"
        except NewtonDiverged as exc:
            sol, status = None, "newton_diverged"
            log.warning("grid %d: %s", n, exc)
        wall = time.perf_counter() - t0
        sols[n] = (grid, sol)
        err = _error_vs_exact(prob, mu, grid, sol) if sol is not None else None
        rows.append(ConvergenceRow(n, float("nan") if err is None else err, None, wall, getattr(sol, "outer_iters", 0), status))
    if any(np.isnan(r.max_error) and r.status != "newton_diverged" for r in rows):
        finest = max(grid_ns)
        ref_grid, ref_sol = sols[finest]
        if ref_sol is None:
            raise NewtonDiverged("reference solve on the finest grid failed", [])
        for r in rows:
            grid, sol = sols[r.grid_n]
            if r.grid_n == finest or sol is None:
                continue
            if not ref_grid.is_refinement_of(grid):
                raise ValueError(f"grid {r.grid_n} is not nested in the reference grid {finest}")
            r.max_error = _error_vs_reference(prob, grid, sol, ref_grid, ref_sol)
        rows = [r for r in rows if r.grid_n != finest]
    for r, o in zip(rows, orders([None if np.isnan(r.max_error) else r.max_error for r in rows])):
        r.order = o
    return rows


# ---------------------------------------------------------------------------
# reduced-basis sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    n_basis: int
    E: float
    online_time: float = 0.0
    failures: int = 0


def truth_cache(prob, grid: Grid, params, tcfg=None, ncfg=None, workers: int = 1) -> list:
    """Truth solutions for a parameter list (converged or capped iterate).

    ``workers > 1`` solves the parameters concurrently on a thread pool; the
    output order always follows ``params``.
    """

    def one(mu):
        try:
            return solve_transport(prob, mu, grid, tcfg, ncfg).u.values
        except OuterNotConverged as exc:
            log.warning("truth at mu=%s hit the outer cap", list(mu))
            return exc.result.u.values

    if workers <= 1:
        return [one(mu) for mu in params]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, params))


def rb_sweep(model: ReducedModel, xi_test, prob, truths=None, n_values=None, cfg: Optional[OnlineConfig] = None) -> list[SweepRow]:
    """E(n) over the test set for the nested sub-models n = 1..N."""
    grid = model.grid
    if model.basis is None:
        raise ValueError("the sweep compares full fields and needs the full basis")
    xi_test = [np.atleast_1d(np.asarray(p, float)) for p in xi_test]
    if truths is None:
        truths = truth_cache(prob, grid, xi_test)
    n_values = range(1, model.n + 1) if n_values is None else n_values
    rows = []
    for n in n_values:
        sub = model.truncate(n)
        E, times, fails = 0.0, [], 0
        for mu, ut in zip(xi_test, truths):
            try:
                rs = online_solve(sub, mu, prob, cfg)
            except OnlineDiverged as exc:
                log.warning("n=%d mu=%s: %s", n, list(mu), exc)
                fails += 1
                continue
            times.append(rs.wall_time)
            E = max(E, map_error(ut, rs.full(sub), grid))
        rows.append(SweepRow(n, E, statistics.median(times) if times else float("nan"), fails))
    return rows


# ---------------------------------------------------------------------------
# timings
# ---------------------------------------------------------------------------


def break_even(offline: float, online: float, fdm: float) -> Optional[int]:
    """Smallest query count for which the reduced model is cheaper overall."""
    if offline <= 0:
        return 1
    if online >= fdm:
        return None
    n = max(1, math.ceil(offline / (fdm - online)))
    while n > 1 and offline + (n - 1) * online <= (n - 1) * fdm:
        n -= 1
    while offline + n * online > n * fdm:
        n += 1
    return n


@dataclass
class TimingReport:
    offline_time: float
    online_time: float
    fdm_time: float
    break_even: Optional[int]
    rows: list = field(default_factory=list)  # (n_run, rb_cumulative, fdm_cumulative)


def median_time(fn, repeats: int = 3) -> float:
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def timing_report(
    model: ReducedModel, prob, grid: Optional[Grid] = None, n_runs: Sequence[int] = (1, 10, 50), mu=None,
    offline_time: Optional[float] = None, online_time: Optional[float] = None, fdm_time: Optional[float] = None,
) -> TimingReport:
    grid = grid or model.grid
    if mu is None:
        mu = np.array([0.5 * (a + b) for a, b in prob.param_box]) if prob.param_box else model.selected_params[0]
    if offline_time is None:
        offline_time = model.timings.get("offline_time")
        if offline_time is None:
            offline_time = sum(h.get("truth_time", 0.0) + h.get("sweep_time", 0.0) for h in model.history)
    if online_time is None:
        online_time = median_time(lambda: online_solve(model, mu, prob))
    if fdm_time is None:
        fdm_time = median_time(lambda: solve_transport(prob, mu, grid), repeats=1)
    rows = [(int(k), offline_time + k * online_time, k * fdm_time) for k in n_runs]
    return TimingReport(offline_time, online_time, fdm_time, break_even(offline_time, online_time, fdm_time), rows)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(fmt(x) for x in v)
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str], timing_columns: Sequence[str] = (), key: Optional[str] = None):
    """Write ``columns`` to ``path``; timing columns go to ``<stem>.timing.csv`` next to it.

    Keeping wall-clock values out of the main table makes it byte-reproducible.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    if timing_columns:
        tcols = ([key] if key else []) + list(timing_columns)
        with open(path.with_suffix(".timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(tcols)
            for r in rows:
                w.writerow([fmt(r.get(c)) for c in tcols])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_jsonable(data), indent=1, sort_keys=True) + "\n")


CONVERGENCE_COLUMNS = ("grid_n", "max_error", "order", "outer_iters")
SWEEP_COLUMNS = ("n_basis", "E", "failures")


def write_convergence(path, rows: Sequence[ConvergenceRow]):
    write_csv(path, [asdict(r) for r in rows], CONVERGENCE_COLUMNS, ("wall_time",), key="grid_n")


def write_sweep(path, rows: Sequence[SweepRow]):
    write_csv(path, [asdict(r) for r in rows], SWEEP_COLUMNS, ("online_time",), key="n_basis")

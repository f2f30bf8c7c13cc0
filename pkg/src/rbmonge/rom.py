"""Reduced residual reduced over-collocation (R2-ROC) for the transport problem.

The online solver never forms a full-grid vector.  For a collocation set
``X_m`` it precomputes the grid rows ``R`` that the residual rows at ``X_m``
read (including the boundary points whose Neumann data enter through ghost
elimination) and works with ``W[R]`` only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ChecksumMismatch,
    FormatVersionMismatch,
    ModelMismatch,
    NewtonDiverged,
    NonFiniteResidual,
    NonpositiveDensity,
    OnlineDiverged,
    OuterNotConverged,
    SingularInterpolation,
    TruthSolveFailed,
    ZeroVector,
)
from .grid import Grid
from .problem import TransportProblem
from .stencil import Stabilization, density_hat, gradient_operator, ma_jacobian, ma_residual, operators, phi_layout
from .truth import NewtonConfig, Solution, TransportConfig, compute_phi, phi_from_gradient, solve_transport

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"RBMONGE-MODEL\n"


# ---------------------------------------------------------------------------
# interpolation helpers
# ---------------------------------------------------------------------------


def eim_point(v, exclude: Sequence[int] = ()) -> int:
    """Index of ``max |v|`` outside ``exclude``; ties go to the lowest index."""
    v = np.abs(np.asarray(getattr(v, "values", v), dtype=float))
    mask = np.ones(v.size, dtype=bool)
    ex = np.asarray(list(exclude), dtype=np.int64)
    if ex.size:
        mask[ex] = False
    if not mask.any():
        raise ZeroVector("every index is excluded")
    w = np.where(mask, v, -1.0)
    k = int(np.argmax(w))  # argmax returns the first maximal entry
    if not w[k] > 0:
        raise ZeroVector("vector vanishes outside the excluded set")
    return k


def interp_orthogonalize(v, basis_cols, points, round_number=None, rcond: float = 1e-13) -> np.ndarray:
    """``v - B a`` with ``a`` chosen so the result vanishes at ``points``."""
    v = np.asarray(getattr(v, "values", v), dtype=float)
    B = np.asarray(basis_cols, dtype=float)
    pts = np.asarray(points, dtype=np.int64)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[1] == 0:
        return v.copy()
    if pts.size != B.shape[1]:
        raise ValueError(f"{B.shape[1]} basis columns need as many points, got {pts.size}")
    M = B[pts]
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= rcond * max(s[0], 1.0):
        raise SingularInterpolation(f"interpolation matrix is singular (sigma_min={s[-1]:.3e})", round_number)
    alpha = np.linalg.solve(M, v[pts])
    return v - B @ alpha


def combine(W: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``W @ c`` accumulated column by column.

    The per-entry operation sequence does not depend on the number of rows,
    so the restricted and the full products agree bit for bit.
    """
    out = W[:, 0] * c[0]
    for j in range(1, c.size):
        out = out + W[:, j] * c[j]
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Collocation:
    """Row-restricted operators for one collocation set."""

    grid: Grid
    points: np.ndarray  # X_m in model order
    rows: np.ndarray  # restricted grid rows R (sorted)
    ops: object
    slots: np.ndarray
    normals: np.ndarray
    grad1: object
    grad2: object

    @classmethod
    def build(cls, grid: Grid, points) -> "Collocation":
        pts = np.asarray(points, dtype=np.int64)
        ops = operators(grid).restrict(pts)
        lay = phi_layout(grid)
        g1, g2 = gradient_operator(grid)
        owners = lay.point[ops.slots]
        g1s, g2s = g1[owners], g2[owners]
        rows = np.union1d(np.union1d(ops.cols, g1s.indices), g2s.indices).astype(np.int64)
        ops = ops.align_columns(rows)
        g1s = _align(g1s, rows)
        g2s = _align(g2s, rows)
        return cls(grid, pts, rows, ops, ops.slots, lay.normal[ops.slots], g1s, g2s)


def _align(m, cols):
    import scipy.sparse as sps

    m = m.tocoo()
    pos = np.searchsorted(cols, m.col)
    out = sps.csr_matrix((m.data, (m.row, pos)), shape=(m.shape[0], cols.size))
    out.sort_indices()
    return out


@dataclass
class ReducedModel:
    problem_name: str
    grid: Grid
    stab: Stabilization
    basis: Optional[np.ndarray]  # N x n, None when only restricted rows are loaded
    solution_points: list
    residual_points: list
    selected_params: list
    residual_basis: Optional[np.ndarray] = None  # N x (n-1)
    c_init: Optional[np.ndarray] = None
    sigma_init: float = 1.0
    B: float = 1.0
    seed: int = 0
    epsilon: float = 1e-8
    K: int = 100
    history: list = field(default_factory=list)
    restricted_rows: Optional[np.ndarray] = None
    restricted_basis: Optional[np.ndarray] = None
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.solution_points = [int(k) for k in self.solution_points]
        self.residual_points = [int(k) for k in self.residual_points]
        self.selected_params = [np.asarray(p, dtype=float) for p in self.selected_params]
        if self.c_init is None:
            self.c_init = np.zeros(self.n)
        self.c_init = np.asarray(self.c_init, dtype=float)
        if self.restricted_rows is None:
            self.restricted_rows = self.collocation.rows
        else:
            self.restricted_rows = np.asarray(self.restricted_rows, dtype=np.int64)
        if self.restricted_basis is None:
            if self.basis is None:
                raise ValueError("either the basis or its restricted rows are required")
            self.restricted_basis = np.ascontiguousarray(self.basis[self.restricted_rows])
        self.validate()

    @property
    def n(self) -> int:
        return len(self.solution_points) - 1

    @property
    def m(self) -> int:
        return len(self.collocation_points)

    @property
    def collocation_points(self) -> list:
        return self.solution_points + self.residual_points

    @cached_property
    def collocation(self) -> Collocation:
        return Collocation.build(self.grid, self.collocation_points)

    def validate(self):
        n = self.n
        if n < 1 or len(self.residual_points) != n - 1:
            raise ValueError(f"need n+1 solution and n-1 residual points, got {len(self.solution_points)}, {len(self.residual_points)}")
        if len(set(self.collocation_points)) != 2 * n:
            raise ValueError("collocation points must be distinct")
        if len({tuple(p) for p in self.selected_params}) != len(self.selected_params):
            raise ValueError("selected parameters must be distinct")
        if self.restricted_basis.shape != (self.restricted_rows.size, n):
            raise ValueError("restricted basis has the wrong shape")

    def truncate(self, n: int) -> "ReducedModel":
        """Nested sub-model with the first ``n`` basis functions and ``2n`` points."""
        if not 1 <= n <= self.n:
            raise ValueError(f"sub-model size must be in [1, {self.n}]")
        sp = self.solution_points[: n + 1]
        rp = self.residual_points[: n - 1]
        sub = Collocation.build(self.grid, sp + rp)
        pos = np.searchsorted(self.restricted_rows, sub.rows)
        return ReducedModel(
            self.problem_name, self.grid, self.stab,
            None if self.basis is None else self.basis[:, :n],
            sp, rp, self.selected_params[:n],
            None if self.residual_basis is None else self.residual_basis[:, : n - 1],
            self.c_init[:n], self.sigma_init, self.B, self.seed, self.epsilon, self.K,
            self.history[:n], sub.rows, np.ascontiguousarray(self.restricted_basis[pos, :n]), dict(self.timings),
        )

    def restricted_only(self) -> "ReducedModel":
        """Copy without the full basis (only the restricted rows kept)."""
        return replace(self, basis=None, residual_basis=None)

    def check(self, prob: TransportProblem, mu=None):
        if prob.name != self.problem_name:
            raise ModelMismatch(f"model trained for {self.problem_name!r}, got problem {prob.name!r}")
        if mu is not None and np.size(mu) != prob.param_dim:
            raise ModelMismatch(f"parameter has {np.size(mu)} entries, problem expects {prob.param_dim}")


@dataclass
class ReducedSolution:
    c: np.ndarray
    sigma: float
    iterations: int
    indicator: float
    converged: bool = True
    c_prev: Optional[np.ndarray] = None
    phi_final: Optional[np.ndarray] = None
    history: list = field(default_factory=list)
    wall_time: float = 0.0

    def full(self, model: ReducedModel) -> np.ndarray:
        if model.basis is None:
            raise ValueError("full reconstruction needs the full basis")
        return combine(model.basis, self.c)


@dataclass
class OnlineConfig:
    epsilon: float = 1e-8
    K: int = 100
    inner_tol: float = 1e-10
    inner_max: int = 50
    warm_start: bool = False  # False: every Gauss-Newton solve starts from the model's initial coefficients


# ---------------------------------------------------------------------------
# online solver
# ---------------------------------------------------------------------------


class _Evaluator:
    """Residual rows at ``X_m`` for one ``(model, mu)``; touches only ``W[R]``."""

    def __init__(self, model: ReducedModel, prob: TransportProblem, mu, stab=None):
        self.model = model
        self.prob = prob
        self.mu = prob.check_mu(mu)
        self.col = model.collocation
        self.W = model.restricted_basis
        self.stab = stab or model.stab
        self.fx = prob.f_x(model.grid.points[self.col.points], self.mu)
        self.fyhat = density_hat(prob, self.mu)

    def u(self, c):
        return combine(self.W, c)

    def phi(self, c):
        u = self.u(c)
        grad = np.column_stack([self.col.grad1 @ u, self.col.grad2 @ u])
        return phi_from_gradient(self.prob, self.col.normals, grad)

    def initial_phi(self, B):
        pts = self.model.grid.points[phi_layout(self.model.grid).point[self.col.slots]]
        return B * (pts * self.col.normals).sum(axis=1)

    def residual(self, c, sigma, phi):
        res, _ = ma_residual(self.col.ops, self.u(c), sigma, phi, self.fx, self.fyhat, self.stab)
        return res

    def residual_and_jacobian(self, c, sigma, phi):
        res, vals = ma_residual(self.col.ops, self.u(c), sigma, phi, self.fx, self.fyhat, self.stab)
        Ju, dsig = ma_jacobian(self.col.ops, vals, sigma, self.fx, self.fyhat, self.stab, dense=True)
        return res, np.column_stack([Ju @ self.W, dsig])


def _gauss_newton(ev: _Evaluator, z0, phi, cfg: OnlineConfig):
    z = np.array(z0, dtype=float)
    n = z.size - 1
    for it in range(cfg.inner_max):
        try:
            r, J = ev.residual_and_jacobian(z[:n], z[n], phi)
        except (NonFiniteResidual, NonpositiveDensity) as exc:
            raise OnlineDiverged(f"reduced residual evaluation failed: {exc}") from exc
        dz = np.linalg.lstsq(J, -r, rcond=None)[0]
        if not np.all(np.isfinite(dz)):
            raise OnlineDiverged("non-finite Gauss-Newton step")
        z = z + dz
        if np.max(np.abs(dz)) <= cfg.inner_tol * max(1.0, np.max(np.abs(z))):
            return z, it + 1, True
    return z, cfg.inner_max, False


def online_solve(model: ReducedModel, mu, prob: TransportProblem, cfg: Optional[OnlineConfig] = None) -> ReducedSolution:
    """Boundary iteration on the reduced space, Gauss-Newton per step."""
    model.check(prob, mu)
    cfg = cfg or OnlineConfig(model.epsilon, model.K)
    cfg = replace(cfg, inner_max=max(cfg.inner_max, 1))
    t0 = time.perf_counter()
    ev = _Evaluator(model, prob, mu)
    n = model.n
    phi = ev.initial_phi(model.B)
    z_init = np.append(model.c_init, model.sigma_init)
    z, _, _ = _gauss_newton(ev, z_init, phi, cfg)
    k, r = 0, 1.0
    hist = []
    c_prev, phi_used = z[:n], phi
    while r >= cfg.epsilon and k < cfg.K:
        phi_used = ev.phi(z[:n])
        c_prev = z[:n]
        z_new, _, _ = _gauss_newton(ev, z if cfg.warm_start else z_init, phi_used, cfg)
        r = float(np.max(np.abs(z_new[:n] - z[:n])))
        hist.append(r)
        z = z_new
        k += 1
    if not np.all(np.isfinite(z)):
        raise OnlineDiverged("non-finite reduced iterate")
    res = ev.residual(z[:n], z[n], phi_used)
    sol = ReducedSolution(
        z[:n].copy(), float(z[n]), k, float(np.max(np.abs(res))), r < cfg.epsilon,
        np.array(c_prev), np.array(phi_used), hist, time.perf_counter() - t0,
    )
    return sol


def reduced_residual(model: ReducedModel, mu, prob: TransportProblem, c, sigma, phi_S) -> np.ndarray:
    """Residual rows at the collocation points, using restricted rows only."""
    return _Evaluator(model, prob, mu).residual(np.asarray(c, float), float(sigma), np.asarray(phi_S, float))


def indicator(model: ReducedModel, mu, rsol: ReducedSolution, phi_final=None, prob: Optional[TransportProblem] = None) -> float:
    """``max |P F(W c, sigma; phi)|`` over the collocation rows."""
    if prob is None:
        from .problem import builtin

        prob = builtin(model.problem_name)
    phi = rsol.phi_final if phi_final is None else phi_final
    return float(np.max(np.abs(reduced_residual(model, mu, prob, rsol.c, rsol.sigma, phi))))


# ---------------------------------------------------------------------------
# offline training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    N_max: int
    xi_train: list
    epsilon: float = 1e-8
    K: int = 100
    seed: int = 0
    B: object = "auto"
    truth: TransportConfig = field(default_factory=TransportConfig)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    inner_tol: float = 1e-10
    inner_max: int = 50
    warm_start: bool = False

    def __post_init__(self):
        self.xi_train = [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.xi_train]
        if self.N_max < 1:
            raise ValueError("N_max must be >= 1")
        if not self.xi_train:
            raise ValueError("training set is empty")

    @property
    def online(self) -> OnlineConfig:
        return OnlineConfig(self.epsilon, self.K, self.inner_tol, self.inner_max, self.warm_start)


def _truth(prob, mu, grid, cfg: TrainConfig) -> Solution:
    try:
        return solve_transport(prob, mu, grid, cfg.truth, cfg.newton)
    except (OuterNotConverged, NewtonDiverged) as exc:
        raise TruthSolveFailed(f"truth solve failed at mu={list(mu)}: {exc}") from exc


def full_residual(prob, grid, mu, u, sigma, phi_values, stab) -> np.ndarray:
    """All grid rows of the Monge-Ampere residual (no mean row)."""
    ops = operators(grid)
    mu = prob.check_mu(mu)
    res, _ = ma_residual(ops, u, sigma, phi_values, prob.f_x(grid.points, mu), density_hat(prob, mu), stab)
    return res


def train(prob: TransportProblem, grid: Grid, tcfg: TrainConfig, progress=None) -> ReducedModel:
    """Greedy construction of the reduced space and the collocation set."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(tcfg.seed)
    xi = tcfg.xi_train
    B = tcfg.truth.resolve_B(prob) if tcfg.B == "auto" else float(tcfg.B)
    stab = prob.stab

    i1 = int(rng.integers(len(xi)))
    t0 = time.perf_counter()
    sol1 = _truth(prob, xi[i1], grid, tcfg)
    truth_time = time.perf_counter() - t0
    u1 = sol1.u.values
    x2 = eim_point(u1)
    x1 = eim_point(u1 - u1[x2], exclude=[x2])
    scale = u1[x2]
    W = (u1 / scale)[:, None]
    Xs, Xr = [x1, x2], []
    Rb = np.zeros((grid.size, 0))
    selected = [i1]
    history = [dict(round=1, selected_mu=xi[i1].tolist(), indicator_max=float("nan"), truth_time=truth_time, sweep_time=0.0)]
    c_init = np.array([scale])
    excluded = set()

    def model_now():
        return ReducedModel(
            prob.name, grid, stab, W, Xs, Xr, [xi[i] for i in selected], Rb,
            np.append(c_init, np.zeros(W.shape[1] - 1)), sol1.sigma, B, tcfg.seed, tcfg.epsilon, tcfg.K,
            [dict(h) for h in history],
        )

    for n in range(2, tcfg.N_max + 1):
        model = model_now()
        t0 = time.perf_counter()
        delta = np.full(len(xi), -np.inf)
        online = {}
        for i, mu in enumerate(xi):
            if i in selected or i in excluded:
                continue
            try:
                rs = online_solve(model, mu, prob, tcfg.online)
            except OnlineDiverged as exc:
                log.warning("online solve failed at mu=%s: %s", mu, exc)
                delta[i] = np.inf
                continue
            delta[i] = rs.indicator
            online[i] = rs
        sweep_time = time.perf_counter() - t0
        truth_time = 0.0
        while True:
            if not np.any(np.isfinite(delta) | (delta == np.inf)):
                raise TruthSolveFailed(f"round {n}: no admissible training parameter left")
            i_n = int(np.argmax(delta))
            t0 = time.perf_counter()
            try:
                sol = _truth(prob, xi[i_n], grid, tcfg)
            except TruthSolveFailed as exc:
                log.warning("round %d: %s; parameter excluded", n, exc)
                excluded.add(i_n)
                delta[i_n] = -np.inf
                continue
            truth_time += time.perf_counter() - t0
            break
        indicator_max = float(np.max(delta[np.isfinite(delta)])) if np.any(np.isfinite(delta)) else float("inf")

        un = interp_orthogonalize(sol.u.values, W, Xs[1:], round_number=n)
        xn = eim_point(un, exclude=Xs + Xr)
        un = un / un[xn]
        # full residual of the previous reduced solution at the new parameter
        rs = online.get(i_n)
        if rs is None:
            rs = online_solve(model, xi[i_n], prob, tcfg.online)
        u_prev = combine(W, rs.c)
        phi_full = compute_phi(prob, grid, combine(W, rs.c_prev)).values
        r = full_residual(prob, grid, xi[i_n], u_prev, rs.sigma, phi_full, stab)
        r = interp_orthogonalize(r, Rb, Xr, round_number=n)
        xr = eim_point(r, exclude=Xs + Xr + [xn])
        r = r / r[xr]

        W = np.column_stack([W, un])
        Rb = np.column_stack([Rb, r])
        Xs = Xs + [xn]
        Xr = Xr + [xr]
        selected.append(i_n)
        history.append(dict(round=n, selected_mu=xi[i_n].tolist(), indicator_max=indicator_max, truth_time=truth_time, sweep_time=sweep_time))
        if progress is not None:
            progress(history[-1])

    model = model_now()
    model.timings = {"offline_time": time.perf_counter() - t_start}
    return model


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_TIMING_KEYS = ("truth_time", "sweep_time")


def _header(model: ReducedModel, arrays: dict) -> dict:
    hist = [{k: v for k, v in h.items() if k not in _TIMING_KEYS} for h in model.history]
    return {
        "format_version": FORMAT_VERSION,
        "problem": model.problem_name,
        "grid": model.grid.to_dict(),
        "stab": {"alpha": model.stab.alpha, "beta": model.stab.beta},
        "params": [p.tolist() for p in model.selected_params],
        "solution_points": model.solution_points,
        "residual_points": model.residual_points,
        "restricted_rows": model.restricted_rows.tolist(),
        "sigma_init": model.sigma_init,
        "B": model.B,
        "seed": model.seed,
        "epsilon": model.epsilon,
        "K": model.K,
        "history": hist,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
    }


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def save_model(model: ReducedModel, path) -> None:
    """Header line (JSON) followed by little-endian float64 arrays.

    The payload checksum covers the array bytes; wall-clock timings go into a
    ``<path>.timing.json`` sidecar so that the model file itself is a pure
    function of the training inputs.
    """
    path = Path(path)
    arrays = {"restricted_basis": model.restricted_basis, "c_init": model.c_init}
    if model.basis is not None:
        arrays["basis"] = model.basis
    if model.residual_basis is not None:
        arrays["residual_basis"] = model.residual_basis
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    head = _nan_to_none(_header(model, arrays))
    head["checksum"] = hashlib.sha256(payload).hexdigest()
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(payload)
    timing = {"offline_time": model.timings.get("offline_time"), "history": [{k: h.get(k) for k in ("round",) + _TIMING_KEYS} for h in model.history]}
    Path(str(path) + ".timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True))


def load_model(path, restricted_only: bool = False) -> ReducedModel:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise ChecksumMismatch(f"{path} is not a model file or is truncated")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    try:
        head = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumMismatch(f"{path}: corrupt header") from exc
    if head.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: format version {head.get('format_version')}, expected {FORMAT_VERSION}")
    payload = data[off + hlen :]
    if hashlib.sha256(payload).hexdigest() != head.get("checksum"):
        raise ChecksumMismatch(f"{path}: payload checksum mismatch (truncated or modified)")
    arrays, pos = {}, 0
    for spec in head["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
    hist = head["history"]
    for h in hist:
        if h.get("indicator_max") is None:
            h["indicator_max"] = float("nan")
    timing_path = Path(str(path) + ".timing.json")
    timings = {}
    if timing_path.exists():
        t = json.loads(timing_path.read_text())
        timings["offline_time"] = t.get("offline_time")
        for h, th in zip(hist, t.get("history", [])):
            for k in _TIMING_KEYS:
                if th.get(k) is not None:
                    h[k] = th[k]
    return ReducedModel(
        head["problem"], Grid.from_dict(head["grid"]), Stabilization(**head["stab"]),
        None if restricted_only else arrays.get("basis"),
        head["solution_points"], head["residual_points"], head["params"],
        None if restricted_only else arrays.get("residual_basis"),
        arrays["c_init"], head["sigma_init"], head["B"], head["seed"], head["epsilon"], head["K"], hist,
        np.asarray(head["restricted_rows"], dtype=np.int64), arrays["restricted_basis"], timings,
    )

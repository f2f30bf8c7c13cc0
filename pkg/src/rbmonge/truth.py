"""Full-order solver: Newton on the bordered Neumann system plus the boundary iteration."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import MissingPhi, NewtonDiverged, NonFiniteResidual, NonpositiveDensity, OuterNotConverged, SingularSystem
from .grid import Grid, make_grid
from .problem import DirichletProblem, TransportProblem, auto_B, extended_fy
from .stencil import (
    BoundaryData,
    GridFunction,
    Stabilization,
    density_hat,
    gradient_operator,
    laplacian_operator,
    ma_jacobian,
    ma_residual,
    operators,
    phi_layout,
)

log = logging.getLogger(__name__)


@dataclass
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 50
    fd_jacobian: bool = False
    backtracking: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class TransportConfig:
    epsilon: float = 1e-8
    K: int = 100
    B: Union[float, str] = "auto"
    warm_start: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (self.B == "auto" or float(self.B) > 0):
            raise ValueError("B must be positive or 'auto'")

    def resolve_B(self, prob: TransportProblem) -> float:
        return auto_B(prob) if self.B == "auto" else float(self.B)


@dataclass(frozen=True)
class Solution:
    u: GridFunction
    sigma: float
    outer_iters: int = 0
    newton_iters_per_outer: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    wall_time: float = 0.0
    outer_history: list = field(default_factory=list)
    phi: Optional[BoundaryData] = None
    converged: bool = True

    @property
    def grid(self) -> Grid:
        return self.u.grid


def _grid_of(prob) -> tuple:
    if isinstance(prob, DirichletProblem):
        return prob.domain_lo, prob.domain_hi
    return prob.source_lo, prob.source_hi


def grid_for(prob, n) -> Grid:
    """Uniform grid over the problem's source box with ``n`` points per axis (int or pair)."""
    lo, hi = _grid_of(prob)
    return make_grid(lo, hi, n)


def check_grid(prob, grid: Grid):
    lo, hi = _grid_of(prob)
    if tuple(map(float, lo)) != grid.bounds_lo or tuple(map(float, hi)) != grid.bounds_hi:
        raise ValueError(f"grid box {grid.bounds_lo}..{grid.bounds_hi} does not match problem {prob.name}")


# ---------------------------------------------------------------------------
# transport (Neumann) subproblem
# ---------------------------------------------------------------------------


class FullSystem:
    """``F(u, sigma; phi)``: the grid residual rows plus the mean-zero row."""

    def __init__(self, prob: TransportProblem, grid: Grid, phi: BoundaryData, mu=(), stab: Optional[Stabilization] = None):
        self.prob = prob
        self.grid = grid
        self.mu = prob.check_mu(mu)
        self.stab = prob.stab if stab is None else stab
        self.phi = phi
        self.phi_values = phi.full()
        self.ops = operators(grid)
        self.fx = prob.f_x(grid.points, self.mu)
        self.fyhat = density_hat(prob, self.mu)

    def residual(self, u, sigma) -> np.ndarray:
        res, _ = ma_residual(self.ops, u, sigma, self.phi_values, self.fx, self.fyhat, self.stab)
        return np.append(res, u.mean())

    def residual_and_jacobian(self, u, sigma):
        res, vals = ma_residual(self.ops, u, sigma, self.phi_values, self.fx, self.fyhat, self.stab)
        Ju, dsig = ma_jacobian(self.ops, vals, sigma, self.fx, self.fyhat, self.stab)
        N = self.grid.size
        J = sps.bmat(
            [[Ju, sps.csr_matrix(dsig[:, None])], [sps.csr_matrix(np.full((1, N), 1.0 / N)), None]],
            format="csc",
        )
        return np.append(res, u.mean()), J


def assemble(sys: FullSystem, u, sigma, jacobian: bool = False):
    u = u.values if isinstance(u, GridFunction) else np.asarray(u, float)
    if jacobian:
        return sys.residual_and_jacobian(u, sigma)
    return sys.residual(u, sigma)


def _fd_jacobian(fun, z, eps=1e-7):
    f0 = fun(z)
    cols = []
    for k in range(z.size):
        dz = np.zeros_like(z)
        dz[k] = eps * (1 + abs(z[k]))
        cols.append((fun(z + dz) - fun(z - dz)) / (2 * dz[k]))
    return f0, sps.csc_matrix(np.column_stack(cols))


def _roundoff_floor(J, z) -> float:
    return 64 * np.finfo(float).eps * float(np.max(abs(J) @ np.abs(z)))


def _newton(fun, fun_jac, z0, cfg: NewtonConfig):
    """Plain Newton with a sparse LU per step.

    Besides ``residual < tol`` an iterate is accepted when its residual is at
    the round-off floor ``64 eps max(|J| |z|)``: with large moment weights on
    fine grids the stencil coefficients grow like ``alpha / h^2`` and the
    requested tolerance can lie below what double precision resolves.
    Returns ``(z, iterations, history)``.
    """
    z = np.array(z0, dtype=float)
    hist = []
    for it in range(cfg.max_iter + 1):
        try:
            if cfg.fd_jacobian:
                F, J = _fd_jacobian(fun, z)
            else:
                F, J = fun_jac(z)
        except (NonFiniteResidual, NonpositiveDensity) as exc:
            raise NewtonDiverged(f"residual evaluation failed: {exc}", hist) from exc
        r = float(np.max(np.abs(F)))
        hist.append(r)
        if not np.isfinite(r):
            raise NewtonDiverged("non-finite residual", hist)
        if r < cfg.tol:
            return z, it, hist
        if not cfg.fd_jacobian and r <= _roundoff_floor(J, z):
            log.info("Newton stopped at the round-off floor, residual %.3e", r)
            return z, it, hist
        if it == cfg.max_iter:
            break
        try:
            dz = spla.splu(J).solve(-F)
        except RuntimeError as exc:
            raise NewtonDiverged(f"singular Jacobian: {exc}", hist) from exc
        if not np.all(np.isfinite(dz)):
            raise NewtonDiverged("non-finite Newton step", hist)
        step = 1.0
        if cfg.backtracking:
            while step > 1e-4:
                try:
                    if np.max(np.abs(fun(z + step * dz))) < r:
                        break
                except (NonFiniteResidual, NonpositiveDensity):
                    pass
                step *= 0.5
        z = z + step * dz
    raise NewtonDiverged(f"no convergence in {cfg.max_iter} iterations (residual {hist[-1]:.3e})", hist)


def newton_solve(sys: FullSystem, u0, sigma0: float, cfg: Optional[NewtonConfig] = None) -> Solution:
    cfg = cfg or NewtonConfig()
    t0 = time.perf_counter()
    N = sys.grid.size
    u0 = u0.values if isinstance(u0, GridFunction) else np.asarray(u0, float)
    z, it, hist = _newton(
        lambda z: sys.residual(z[:N], z[N]),
        lambda z: sys.residual_and_jacobian(z[:N], z[N]),
        np.append(u0, sigma0),
        cfg,
    )
    return Solution(
        GridFunction(sys.grid, z[:N]), float(z[N]), 0, [it], hist, time.perf_counter() - t0, phi=sys.phi
    )


def initial_guess(prob: TransportProblem, mu, phi: BoundaryData, grid: Optional[Grid] = None):
    """Poisson-Neumann start: ``Lap_h u = s sqrt(2 fX(x) / fY(x - y0))``, mean zero.

    Solved jointly for ``(u, s)``; the ghosts are eliminated with the first
    layer only, which is all the nine-point Laplacian touches.
    """
    grid = grid or phi.grid
    mu = prob.check_mu(mu)
    N = grid.size
    Lu, Lp = laplacian_operator(grid)
    x = grid.points
    y0 = np.asarray(prob.y0)
    ratio = prob.f_x(x, mu) / extended_fy(prob, x - y0, mu)
    if np.any(ratio <= 0) or not np.all(np.isfinite(ratio)):
        raise NonpositiveDensity("initialisation density ratio not positive")
    rhs_col = np.sqrt(2 * ratio)
    A = sps.bmat(
        [[Lu, sps.csr_matrix(-rhs_col[:, None])], [sps.csr_matrix(np.full((1, N), 1.0 / N)), None]],
        format="csc",
    )
    b = np.append(-(Lp @ phi.full()), 0.0)
    try:
        z = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise SingularSystem(f"initialisation system is singular: {exc}") from exc
    if not np.all(np.isfinite(z)):
        raise SingularSystem("initialisation system produced non-finite values")
    return GridFunction(grid, z[:N]), float(z[N])


def initial_phi(prob: TransportProblem, grid: Grid, B: float) -> BoundaryData:
    """``phi = B x . n`` on every slot."""
    return BoundaryData.from_function(grid, lambda p, n: B * (p * n).sum(axis=1))


def boundary_gradient(grid: Grid, u, points=None) -> np.ndarray:
    """Discrete gradient (ghost-free) at ``points`` (default: every grid point)."""
    g1, g2 = gradient_operator(grid)
    if points is not None:
        g1, g2 = g1[points], g2[points]
    return np.column_stack([g1 @ u, g2 @ u])


def phi_from_gradient(prob: TransportProblem, normals: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return (prob.target.project(grad) * normals).sum(axis=1)


def compute_phi(prob: TransportProblem, grid: Grid, u) -> BoundaryData:
    """``phi = P(grad_h u) . n`` on every slot, with the one-sided boundary gradient."""
    u = u.values if isinstance(u, GridFunction) else np.asarray(u, float)
    lay = phi_layout(grid)
    grad = boundary_gradient(grid, u, lay.point)
    return BoundaryData(grid, phi_from_gradient(prob, lay.normal, grad))


def solve_transport(
    prob: TransportProblem,
    mu,
    grid: Grid,
    tcfg: Optional[TransportConfig] = None,
    ncfg: Optional[NewtonConfig] = None,
    stab: Optional[Stabilization] = None,
) -> Solution:
    """Boundary iteration around Newton solves of the Neumann subproblem.

    Every Newton solve starts from the Poisson initial guess for the current
    boundary data unless ``tcfg.warm_start`` asks for the previous iterate.
    """
    tcfg = tcfg or TransportConfig()
    ncfg = ncfg or NewtonConfig()
    check_grid(prob, grid)
    mu = prob.check_mu(mu)
    t0 = time.perf_counter()
    phi = initial_phi(prob, grid, tcfg.resolve_B(prob))
    u, sigma = initial_guess(prob, mu, phi, grid)
    u_prev = None
    newton_iters, res_hist, outer_hist = [], [], []
    k = 0
    r = np.inf
    while k < tcfg.K:
        if u_prev is not None:
            phi = compute_phi(prob, grid, u)
            start = (u, sigma) if tcfg.warm_start else initial_guess(prob, mu, phi, grid)
        else:
            start = (u, sigma)
        sys = FullSystem(prob, grid, phi, mu, stab)
        sol = newton_solve(sys, *start, ncfg)
        newton_iters.append(sol.newton_iters_per_outer[0])
        res_hist.append(sol.residual_history[-1])
        u_prev = u
        u, sigma = sol.u, sol.sigma
        r = float(np.max(np.abs(u.values - u_prev.values)))
        outer_hist.append(r)
        k += 1
        if r < tcfg.epsilon:
            break
    result = Solution(
        u, sigma, k, newton_iters, res_hist, time.perf_counter() - t0, outer_hist, phi, converged=r < tcfg.epsilon
    )
    if sigma <= 0:
        log.warning("sigma = %g <= 0 at the final iterate of %s", sigma, prob.name)
    if not result.converged:
        raise OuterNotConverged(f"boundary iteration hit K={tcfg.K} with r={r:.3e}", result)
    return result


# ---------------------------------------------------------------------------
# Dirichlet problem
# ---------------------------------------------------------------------------


def _const_one(grad):
    return np.ones(grad.shape[0]), np.zeros_like(grad)


class DirichletSystem:
    """Interior rows ``f - det + stabilisation``; boundary rows ``u - g``."""

    def __init__(self, prob: DirichletProblem, grid: Grid, mu=(), stab: Optional[Stabilization] = None):
        self.prob = prob
        self.grid = grid
        self.mu = prob.check_mu(mu)
        self.stab = prob.stab if stab is None else stab
        self.interior = grid.interior_indices
        self.boundary = grid.boundary_indices
        self.ops = operators(grid, prob.bc).restrict(self.interior).align_columns(np.arange(grid.size))
        self.f = prob.f(grid.points[self.interior], self.mu)
        self.g = prob.g(grid.points[self.boundary], self.mu)
        N = grid.size
        self._bsel = sps.csr_matrix(
            (np.ones(self.boundary.size), (np.arange(self.boundary.size), self.boundary)), shape=(self.boundary.size, N)
        )
        perm = np.concatenate([self.interior, self.boundary])
        self._order = np.argsort(perm)

    def residual(self, u):
        res, _ = ma_residual(self.ops, u, 1.0, None, self.f, _const_one, self.stab)
        return np.concatenate([res, u[self.boundary] - self.g])[self._order]

    def residual_and_jacobian(self, u):
        res, vals = ma_residual(self.ops, u, 1.0, None, self.f, _const_one, self.stab)
        Ju, _ = ma_jacobian(self.ops, vals, 1.0, self.f, _const_one, self.stab)
        J = sps.vstack([Ju, self._bsel]).tocsr()[self._order]
        return np.concatenate([res, u[self.boundary] - self.g])[self._order], J.tocsc()

    def poisson_start(self) -> np.ndarray:
        """``Lap_h u = 2 sqrt(f)`` with the boundary data, five-point stencil."""
        grid = self.grid
        Lu, _ = laplacian_operator(grid, "dirichlet", nine_point=False)
        A = sps.vstack([Lu[self.interior], self._bsel]).tocsr()[self._order]
        b = np.concatenate([2 * np.sqrt(np.maximum(self.f, 0.0)), self.g])[self._order]
        return spla.splu(A.tocsc()).solve(b)


def solve_dirichlet(
    prob: DirichletProblem, mu, grid: Grid, ncfg: Optional[NewtonConfig] = None, stab: Optional[Stabilization] = None
) -> Solution:
    ncfg = ncfg or NewtonConfig()
    check_grid(prob, grid)
    t0 = time.perf_counter()
    sys = DirichletSystem(prob, grid, mu, stab)
    z, it, hist = _newton(sys.residual, sys.residual_and_jacobian, sys.poisson_start(), ncfg)
    return Solution(GridFunction(grid, z), float("nan"), 0, [it], hist, time.perf_counter() - t0)


def exact_potential_gradient(prob, grid: Grid, mu=()) -> Optional[np.ndarray]:
    if getattr(prob, "exact_map", None) is None:
        return None
    return prob.exact_map(grid.points, prob.check_mu(mu))

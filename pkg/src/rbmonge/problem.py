"""Densities, target geometry and the built-in test problems.

All density and map callables are vectorised: they take an ``(k, 2)`` array
of points and a parameter vector ``mu`` (shape ``(p,)``, possibly empty) and
return ``(k,)`` values, ``(k, 2)`` gradients or ``(k, 2)`` map images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import CenterSingularity, NotBoundary, UnknownProblem
from .grid import BoundaryClass, Grid
from .stencil import Stabilization

Array = np.ndarray


def _pts(v) -> tuple[Array, bool]:
    a = np.asarray(v, dtype=float)
    single = a.ndim == 1
    return np.atleast_2d(a), single


# ---------------------------------------------------------------------------
# target geometry
# ---------------------------------------------------------------------------


class TargetBoundary:
    """A convex target set with closed-form boundary projection."""

    kind = "abstract"

    def project(self, v) -> Array:
        """Exact nearest point of the boundary (no boundary sampling)."""
        p, single = _pts(v)
        out = self._project(p)
        return out[0] if single else out

    def levelset(self, v) -> Array:
        """Signed distance to the boundary, negative inside."""
        p, single = _pts(v)
        out = self._levelset(p)
        return out[0] if single else out

    def contains(self, v) -> Array:
        """Closed-set membership: boundary points count as inside."""
        p, single = _pts(v)
        out = self._contains(p)
        return out[0] if single else out

    def _contains(self, p):
        return self._levelset(p) <= 0.0

    def project_jacobian_outside(self, p) -> Array:
        """``(k, 2, 2)`` derivative of the nearest-point map for points outside."""
        raise NotImplementedError

    def sample_boundary(self, n: int) -> Array:
        raise NotImplementedError

    def bounding_box(self) -> tuple[Array, Array]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Rectangle(TargetBoundary):
    lo: tuple[float, float]
    hi: tuple[float, float]
    kind = "rectangle"

    def __post_init__(self):
        if not (self.hi[0] > self.lo[0] and self.hi[1] > self.lo[1]):
            raise ValueError(f"degenerate rectangle {self.lo}..{self.hi}")

    @property
    def centroid(self) -> Array:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def _contains(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def _project(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        out = np.clip(p, lo, hi)
        inside = self._contains(p)
        if np.any(inside):
            q = p[inside]
            # distances to left, right, bottom, top sides
            d = np.column_stack([q[:, 0] - lo[0], hi[0] - q[:, 0], q[:, 1] - lo[1], hi[1] - q[:, 1]])
            side = np.argmin(d, axis=1)
            r = q.copy()
            r[side == 0, 0] = lo[0]
            r[side == 1, 0] = hi[0]
            r[side == 2, 1] = lo[1]
            r[side == 3, 1] = hi[1]
            out[inside] = r
        return out

    def project_jacobian_outside(self, p):
        p, _ = _pts(p)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        free = (p > lo) & (p < hi)
        j = np.zeros((p.shape[0], 2, 2))
        j[:, 0, 0], j[:, 1, 1] = free[:, 0], free[:, 1]
        return j

    def _levelset(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        inside = self._contains(p)
        outside_d = np.linalg.norm(p - np.clip(p, lo, hi), axis=1)
        inner = np.minimum.reduce([p[:, 0] - lo[0], hi[0] - p[:, 0], p[:, 1] - lo[1], hi[1] - p[:, 1]])
        return np.where(inside, -inner, outside_d)

    def vertices(self) -> Array:
        (a1, a2), (b1, b2) = self.lo, self.hi
        return np.array([[a1, a2], [b1, a2], [b1, b2], [a1, b2]], dtype=float)

    def bounding_box(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def sample_boundary(self, n: int) -> Array:
        return ConvexPolygon(tuple(map(tuple, self.vertices()))).sample_boundary(n)

    def to_dict(self):
        return {"kind": self.kind, "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Circle(TargetBoundary):
    center: tuple[float, float]
    radius: float
    kind = "circle"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")

    @property
    def centroid(self) -> Array:
        return np.asarray(self.center, dtype=float)

    def _project(self, p):
        c = np.asarray(self.center, dtype=float)
        d = p - c
        r = np.linalg.norm(d, axis=1)
        at_center = r == 0.0
        safe = np.where(at_center, 1.0, r)
        out = c + self.radius * d / safe[:, None]
        # every boundary point is nearest to the centre; pick (r, 0) deterministically
        out[at_center] = c + np.array([self.radius, 0.0])
        return out

    def project_strict(self, v) -> Array:
        """Like :meth:`project` but refuses the ambiguous centre point."""
        p, _ = _pts(v)
        if np.any(np.all(p == np.asarray(self.center), axis=1)):
            raise CenterSingularity(f"projection of the centre {self.center} is not unique")
        return self.project(v)

    def _levelset(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def project_jacobian_outside(self, p):
        p, _ = _pts(p)
        d = p - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(d, axis=1)
        e = d / r[:, None]
        return (self.radius / r)[:, None, None] * (np.eye(2)[None] - e[:, :, None] * e[:, None, :])

    def bounding_box(self):
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius

    def sample_boundary(self, n: int) -> Array:
        t = 2 * np.pi * np.arange(n) / n
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(t), np.sin(t)])

    def to_dict(self):
        return {"kind": self.kind, "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class ConvexPolygon(TargetBoundary):
    vertices_ccw: tuple[tuple[float, float], ...]
    kind = "polygon"

    def __post_init__(self):
        v = np.asarray(self.vertices_ccw, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ValueError("polygon needs at least three 2-D vertices")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross <= 0):
            raise ValueError("polygon must be strictly convex with counter-clockwise vertices")

    @property
    def _v(self) -> Array:
        return np.asarray(self.vertices_ccw, dtype=float)

    @property
    def centroid(self) -> Array:
        v = self._v
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        area = cross.sum() / 2
        return ((v + w) * cross[:, None]).sum(axis=0) / (6 * area)

    def _edge_projections(self, p):
        a = self._v
        b = np.roll(a, -1, axis=0)
        e = b - a
        # shape (k, m): parameter of the foot point on each edge
        t = ((p[:, None, :] - a[None]) * e[None]).sum(axis=2) / (e * e).sum(axis=1)[None]
        t = np.clip(t, 0.0, 1.0)
        foot = a[None] + t[..., None] * e[None]
        d2 = ((foot - p[:, None, :]) ** 2).sum(axis=2)
        return foot, d2

    def _project(self, p):
        foot, d2 = self._edge_projections(p)
        best = np.argmin(d2, axis=1)
        return foot[np.arange(p.shape[0]), best]

    def project_jacobian_outside(self, p):
        p, _ = _pts(p)
        a = self._v
        e = np.roll(a, -1, axis=0) - a
        foot, d2 = self._edge_projections(p)
        best = np.argmin(d2, axis=1)
        t = ((p - a[best]) * e[best]).sum(axis=1) / (e[best] ** 2).sum(axis=1)
        tang = e[best] / np.linalg.norm(e[best], axis=1)[:, None]
        on_edge = (t > 0) & (t < 1)
        return on_edge[:, None, None] * tang[:, :, None] * tang[:, None, :]

    def _contains(self, p):
        a = self._v
        e = np.roll(a, -1, axis=0) - a
        rel = p[:, None, :] - a[None]
        cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
        return np.all(cross >= 0, axis=1)

    def _levelset(self, p):
        _, d2 = self._edge_projections(p)
        d = np.sqrt(d2.min(axis=1))
        return np.where(self._contains(p), -d, d)

    def bounding_box(self):
        return self._v.min(axis=0), self._v.max(axis=0)

    def sample_boundary(self, n: int) -> Array:
        a = self._v
        b = np.roll(a, -1, axis=0)
        per = max(1, n // len(a))
        t = np.arange(per) / per
        return np.concatenate([a[i] + t[:, None] * (b[i] - a[i]) for i in range(len(a))])

    def to_dict(self):
        return {"kind": self.kind, "vertices": [list(v) for v in self.vertices_ccw]}


def target_from_dict(d: dict) -> TargetBoundary:
    kind = d["kind"]
    if kind == "rectangle":
        return Rectangle(tuple(d["lo"]), tuple(d["hi"]))
    if kind == "circle":
        return Circle(tuple(d["center"]), float(d["radius"]))
    if kind == "polygon":
        return ConvexPolygon(tuple(tuple(v) for v in d["vertices"]))
    raise ValueError(f"unknown target kind {kind!r}")


def project_boundary(target: TargetBoundary, v) -> Array:
    return target.project(v)


def levelset(target: TargetBoundary, v) -> Array:
    return target.levelset(v)


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Density:
    eval: Callable[[Array, Array], Array]
    descriptor: str
    grad: Optional[Callable[[Array, Array], Array]] = None

    def __call__(self, x, mu):
        return self.eval(np.atleast_2d(np.asarray(x, float)), np.asarray(mu, float))

    def gradient(self, x, mu):
        x = np.atleast_2d(np.asarray(x, float))
        if self.grad is None:
            return np.zeros_like(x)
        return self.grad(x, np.asarray(mu, float))


@dataclass(frozen=True)
class TransportProblem:
    name: str
    source_lo: tuple[float, float]
    source_hi: tuple[float, float]
    target: TargetBoundary
    f_x: Density
    f_y: Density
    stab: Stabilization
    y0: Optional[tuple[float, float]] = None
    exact_map: Optional[Callable[[Array, Array], Array]] = None
    exact_map_jacobian: Optional[Callable[[Array, Array], Array]] = None
    param_dim: int = 0
    param_box: tuple = ()
    xi_train: tuple[str, ...] = ()
    xi_test: tuple[str, ...] = ()
    reference_only: bool = False
    notes: str = ""
    extension: str = "nearest"
    kind: str = field(default="transport", init=False)

    def __post_init__(self):
        y0 = self.target.centroid if self.y0 is None else np.asarray(self.y0, float)
        if not float(self.target.levelset(y0)) < 0:
            raise ValueError(f"{self.name}: y0={tuple(y0)} is not strictly inside the target")
        if self.extension not in ("positional", "nearest"):
            raise ValueError(f"unknown density extension {self.extension!r}")
        object.__setattr__(self, "y0", tuple(float(c) for c in y0))

    def with_stab(self, stab: Stabilization) -> "TransportProblem":
        return replace(self, stab=stab)

    def check_mu(self, mu) -> Array:
        mu = np.atleast_1d(np.asarray(mu, dtype=float)).ravel() if np.size(mu) else np.zeros(0)
        if mu.size != self.param_dim:
            raise ValueError(f"problem {self.name} expects {self.param_dim} parameter(s), got {mu.size}")
        return mu


@dataclass(frozen=True)
class DirichletProblem:
    name: str
    domain_lo: tuple[float, float]
    domain_hi: tuple[float, float]
    f: Density
    g: Callable[[Array, Array], Array]
    stab: Stabilization
    exact_solution: Optional[Callable[[Array, Array], Array]] = None
    param_dim: int = 0
    param_box: tuple = ()
    xi_train: tuple[str, ...] = ()
    xi_test: tuple[str, ...] = ()
    notes: str = ""
    closure: str = "linear"
    kind: str = field(default="dirichlet", init=False)

    def __post_init__(self):
        if self.closure not in ("linear", "laplacian"):
            raise ValueError(f"unknown ghost closure {self.closure!r}")

    @property
    def bc(self) -> str:
        return "dirichlet" if self.closure == "linear" else "dirichlet_laplacian"

    def with_stab(self, stab: Stabilization) -> "DirichletProblem":
        return replace(self, stab=stab)

    check_mu = TransportProblem.check_mu


def extended_fy(prob: TransportProblem, y, mu) -> Array:
    """Target density extended outside the target.

    ``positional``: the constant value at ``y0``.  ``nearest``: the value at
    the nearest boundary point, which keeps the extension continuous.
    """
    y, single = _pts(y)
    inside = prob.target.contains(y)
    val = np.empty(y.shape[0])
    if np.any(inside):
        val[inside] = prob.f_y(y[inside], mu)
    if not np.all(inside):
        if prob.extension == "nearest":
            val[~inside] = prob.f_y(prob.target.project(y[~inside]), mu)
        else:
            val[~inside] = prob.f_y(np.asarray([prob.y0]), mu)[0]
    return val[0] if single else val


def extended_fy_grad(prob: TransportProblem, y, mu) -> Array:
    """Gradient of :func:`extended_fy`, branch by branch.

    The positional outer branch is constant; the nearest-point branch is
    differentiated through the projection.
    """
    y, single = _pts(y)
    inside = prob.target.contains(y)
    g = np.zeros_like(y)
    if np.any(inside):
        g[inside] = prob.f_y.gradient(y[inside], mu)
    if prob.extension == "nearest" and not np.all(inside):
        out = y[~inside]
        jp = prob.target.project_jacobian_outside(out)
        gp = prob.f_y.gradient(prob.target.project(out), mu)
        g[~inside] = np.einsum("kij,ki->kj", jp, gp)
    return g[0] if single else g


@dataclass(frozen=True)
class BoundaryNormals:
    edges: tuple[Array, ...]
    diagonal: Optional[Array] = None


_EDGE_NORMALS = {
    BoundaryClass.EDGE_LEFT: ((-1.0, 0.0),),
    BoundaryClass.EDGE_RIGHT: ((1.0, 0.0),),
    BoundaryClass.EDGE_BOTTOM: ((0.0, -1.0),),
    BoundaryClass.EDGE_TOP: ((0.0, 1.0),),
    BoundaryClass.CORNER_BL: ((-1.0, 0.0), (0.0, -1.0)),
    BoundaryClass.CORNER_BR: ((1.0, 0.0), (0.0, -1.0)),
    BoundaryClass.CORNER_TL: ((-1.0, 0.0), (0.0, 1.0)),
    BoundaryClass.CORNER_TR: ((1.0, 0.0), (0.0, 1.0)),
}


def outward_normal(grid: Grid, theta) -> BoundaryNormals:
    cls = grid.classify(theta)
    if cls is BoundaryClass.INTERIOR:
        raise NotBoundary(f"theta={tuple(theta)} is an interior point")
    edges = tuple(np.array(n) for n in _EDGE_NORMALS[cls])
    diag = (edges[0] + edges[1]) / math.sqrt(2.0) if cls.is_corner else None
    return BoundaryNormals(edges, diag)


def auto_B(prob: TransportProblem, margin: float = 2.0) -> float:
    """Scale B such that ``{B x : x in X}`` covers the target with a margin."""
    lo_y, hi_y = prob.target.bounding_box()
    a = np.asarray(prob.source_lo, float)
    b = np.asarray(prob.source_hi, float)
    need = 0.0
    for y in (lo_y, hi_y):
        for i in range(2):
            if y[i] > 0:
                if b[i] <= 0:
                    raise ValueError("target not reachable by scaling the source box")
                need = max(need, y[i] / b[i])
            elif y[i] < 0:
                if a[i] >= 0:
                    raise ValueError("target not reachable by scaling the source box")
                need = max(need, y[i] / a[i])
    return margin * max(need, 1.0)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

_PI = math.pi
_OMEGA = 8 * _PI


class _TrigPoly:
    """``P(z) cos(w z) + Q(z) sin(w z)`` with polynomial P, Q and derivatives."""

    def __init__(self, p, q, w):
        self.p = np.polynomial.Polynomial(p)
        self.q = np.polynomial.Polynomial(q)
        self.w = w

    def deriv(self) -> "_TrigPoly":
        w = self.w
        new_p = self.p.deriv() + w * self.q
        new_q = self.q.deriv() - w * self.p
        out = _TrigPoly([0], [0], w)
        out.p, out.q = new_p, new_q
        return out

    def __call__(self, z):
        return self.p(z) * np.cos(self.w * z) + self.q(z) * np.sin(self.w * z)


def _q_test2() -> _TrigPoly:
    # (-z^2/(8 pi) + 1/(256 pi^3) + 1/(32 pi)) cos(8 pi z) + z sin(8 pi z)/(32 pi^2)
    return _TrigPoly([1 / (256 * _PI**3) + 1 / (32 * _PI), 0, -1 / (8 * _PI)], [0, 1 / (32 * _PI**2)], _OMEGA)


def _q_rb1(mu: float) -> _TrigPoly:
    # (-z^2/(mu pi) + 1/(32 mu pi^3) + 1/(4 mu pi)) cos(8 pi z) + z sin(8 pi z)/(4 mu pi^2)
    return _TrigPoly(
        [1 / (32 * mu * _PI**3) + 1 / (4 * mu * _PI), 0, -1 / (mu * _PI)],
        [0, 1 / (4 * mu * _PI**2)],
        _OMEGA,
    )


def _perturbed_identity(qfun):
    """Density, map and map Jacobian of ``u = |x|^2/2 + 4 q(x1) q(x2)``."""

    def parts(x, mu):
        q = qfun(mu)
        d1 = q.deriv()
        d2 = d1.deriv()
        x1, x2 = x[:, 0], x[:, 1]
        return (q(x1), d1(x1), d2(x1)), (q(x2), d1(x2), d2(x2))

    def f_x(x, mu):
        (a, a1, a2), (b, b1, b2) = parts(x, mu)
        return 1 + 4 * (a2 * b + a * b2) + 16 * (a * b * a2 * b2 - a1**2 * b1**2)

    def tmap(x, mu):
        (a, a1, _), (b, b1, _) = parts(x, mu)
        return np.column_stack([x[:, 0] + 4 * a1 * b, x[:, 1] + 4 * b1 * a])

    def jac(x, mu):
        (a, a1, a2), (b, b1, b2) = parts(x, mu)
        j = np.empty((x.shape[0], 2, 2))
        j[:, 0, 0] = 1 + 4 * a2 * b
        j[:, 1, 1] = 1 + 4 * a * b2
        j[:, 0, 1] = j[:, 1, 0] = 4 * a1 * b1
        return j

    return f_x, tmap, jac


def _const_density(c: float = 1.0) -> Density:
    return Density(lambda x, mu: np.full(x.shape[0], c), f"{c}", lambda x, mu: np.zeros_like(x))


def _blowup_density(center_of_mu) -> Density:
    """exp(-2|y - (0.5, 0.5)|) / |y - p(mu)|"""

    def ev(y, mu):
        p = center_of_mu(mu)
        rho = np.hypot(y[:, 0] - 0.5, y[:, 1] - 0.5)
        d = np.hypot(y[:, 0] - p[0], y[:, 1] - p[1])
        return np.exp(-2 * rho) / d

    def grad(y, mu):
        p = center_of_mu(mu)
        c = y - 0.5
        rho = np.hypot(c[:, 0], c[:, 1])
        r = y - np.asarray(p)
        d = np.hypot(r[:, 0], r[:, 1])
        f = np.exp(-2 * rho) / d
        unit_c = c / np.where(rho > 0, rho, 1.0)[:, None]
        return f[:, None] * (-2 * unit_c - r / (d * d)[:, None])

    return Density(ev, "exp(-2|y-(0.5,0.5)|)/|y-p|", grad)


def _ring_density(center_of_mu, radius2: float) -> Density:
    """1 + 5 exp(-50 | |y - c(mu)|^2 - r^2 |)"""

    def s_of(y, mu):
        c = center_of_mu(mu)
        r = y - np.asarray(c)
        return r, (r**2).sum(axis=1) - radius2

    def ev(y, mu):
        _, s = s_of(y, mu)
        return 1 + 5 * np.exp(-50 * np.abs(s))

    def grad(y, mu):
        r, s = s_of(y, mu)
        e = 5 * np.exp(-50 * np.abs(s))
        return (e * -50 * np.sign(s))[:, None] * 2 * r

    return Density(ev, f"1+5exp(-50|.|) ring r^2={radius2}", grad)


def _gaussian_bump(width2_of_mu, amp_of_mu) -> Density:
    """1 + amp(mu) exp(-|y|^2 / w(mu))"""

    def ev(y, mu):
        w = width2_of_mu(mu)
        return 1 + amp_of_mu(mu) * np.exp(-(y**2).sum(axis=1) / w)

    def grad(y, mu):
        w = width2_of_mu(mu)
        g = amp_of_mu(mu) * np.exp(-(y**2).sum(axis=1) / w)
        return g[:, None] * (-2 * y / w)

    return Density(ev, "1+a exp(-|y|^2/w)", grad)


def _test1() -> TransportProblem:
    def fx(x, mu):
        return np.exp(-0.5 * x[:, 0] ** 2 / 0.16 - 0.5 * x[:, 1] ** 2 / 0.16) / 0.16

    def fy(y, mu):
        return np.exp(-0.5 * (y[:, 0] - 1) ** 2 / 0.16 - 0.5 * y[:, 1] ** 2 / 0.04) / 0.08

    def fy_grad(y, mu):
        f = fy(y, mu)
        return np.column_stack([-f * (y[:, 0] - 1) / 0.16, -f * y[:, 1] / 0.04])

    def tmap(x, mu):
        return np.column_stack([x[:, 0] + 1, x[:, 1] / 2])

    def jac(x, mu):
        j = np.zeros((x.shape[0], 2, 2))
        j[:, 0, 0], j[:, 1, 1] = 1.0, 0.5
        return j

    return TransportProblem(
        "t1", (-0.5, -0.5), (0.5, 0.5), Rectangle((0.5, -0.25), (1.5, 0.25)),
        Density(fx, "gaussian(0,0.4,0.4)/0.16"), Density(fy, "gaussian((1,0),0.4,0.2)/0.08", fy_grad),
        Stabilization(0.0, 0.0), exact_map=tmap, exact_map_jacobian=jac,
    )


def _test2() -> TransportProblem:
    f_x, tmap, jac = _perturbed_identity(lambda mu: _q_test2())
    return TransportProblem(
        "t2", (-0.5, -0.5), (0.5, 0.5), Rectangle((-0.5, -0.5), (0.5, 0.5)),
        Density(f_x, "det D^2(|x|^2/2 + 4 q q)"), _const_density(1.0),
        Stabilization(0.0, 0.0), exact_map=tmap, exact_map_jacobian=jac,
    )


def _test3() -> TransportProblem:
    return TransportProblem(
        "t3", (0.0, 0.0), (1.0, 1.0), Rectangle((0.0, 0.0), (1.0, 1.0)),
        _const_density(1.0), _blowup_density(lambda mu: (0.7, 0.7)), Stabilization(1.0, 0.0),
    )


def _test4() -> TransportProblem:
    return TransportProblem(
        "t4", (-0.5, -0.5), (0.5, 0.5), Circle((0.0, 0.0), 0.5),
        _const_density(1.0), _gaussian_bump(lambda mu: 0.02, lambda mu: 1 / (0.02 * _PI)),
        Stabilization(10.0, 0.0),
    )


def _rb1(printed: bool = False) -> TransportProblem:
    f_x, tmap, jac = _perturbed_identity(lambda mu: _q_rb1(float(mu[0])))
    common = dict(
        target=Rectangle((-0.5, -0.5), (0.5, 0.5)), f_y=_const_density(1.0), stab=Stabilization(0.0, 0.0),
        exact_map=tmap, exact_map_jacobian=jac, param_dim=1, param_box=((5.0, 20.0),),
        xi_train=("5:0.2:20",), xi_test=("5.1:0.2:19.9",),
    )
    if printed:
        dens = Density(lambda x, mu: np.full(x.shape[0], 1 - 0.031 / float(mu[0])), "1-0.031/mu")
        return TransportProblem(
            "rb1_printed", (-0.5, -0.5), (0.5, 0.5), f_x=dens, reference_only=True,
            notes="source density as printed; the exact map does not satisfy mass balance with it",
            **common,
        )
    return TransportProblem(
        "rb1", (-0.5, -0.5), (0.5, 0.5), f_x=Density(f_x, "det D^2(|x|^2/2 + 4 q_mu q_mu)"),
        notes="source density is the mass-balanced density of the printed exact map",
        **common,
    )


def _rb2() -> TransportProblem:
    return TransportProblem(
        "rb2", (0.0, 0.0), (1.0, 1.0), Rectangle((0.0, 0.0), (1.0, 1.0)),
        _const_density(1.0), _blowup_density(lambda mu: (mu[0], mu[1])), Stabilization(200.0, 0.0),
        param_dim=2, param_box=((0.1, 0.9), (0.1, 0.9)),
        xi_train=("0.1:0.04:0.9", "0.1:0.04:0.9"), xi_test=("0.13:0.08:0.89", "0.13:0.08:0.89"),
    )


def _rb3() -> TransportProblem:
    return TransportProblem(
        "rb3", (0.0, 0.0), (1.0, 1.0), Rectangle((0.0, 0.0), (1.0, 1.0)),
        _const_density(1.0), _ring_density(lambda mu: (0.5 + mu[0], 0.5), 0.09), Stabilization(50.0, 0.0),
        param_dim=1, param_box=((0.0, 1.0),), xi_train=("0:0.02:1",), xi_test=("0.01:0.02:0.99",),
    )


def _rb4() -> TransportProblem:
    def center(mu):
        c = 0.5 + 0.25 * math.cos(2 * _PI * mu[0])
        return (c, c)

    return TransportProblem(
        "rb4", (0.0, 0.0), (1.0, 1.0), Rectangle((0.0, 0.0), (1.0, 1.0)),
        _const_density(1.0), _ring_density(center, 0.01), Stabilization(50.0, 0.0),
        param_dim=1, param_box=((0.0, 1.0),), xi_train=("0:0.02:1",), xi_test=("0.01:0.02:0.99",),
    )


def _rb5() -> TransportProblem:
    return TransportProblem(
        "rb5", (-0.5, -0.5), (0.5, 0.5), Circle((0.0, 0.0), 0.5),
        _const_density(1.0),
        _gaussian_bump(lambda mu: 2 * mu[0] ** 2, lambda mu: 1 / (2 * _PI * mu[0] ** 2)),
        Stabilization(10.0, 0.0), param_dim=1, param_box=((0.1, 0.3),),
        xi_train=("0.1:0.01:0.3",), xi_test=("0.105:0.01:0.295",),
    )


def _radial(x, c=(0.5, 0.5)):
    return np.hypot(x[:, 0] - c[0], x[:, 1] - c[1])


def _d_cinf(parametric: bool) -> DirichletProblem:
    if parametric:
        def u(x, mu):
            return np.exp(mu[0] * (x**2).sum(axis=1))

        def f(x, mu):
            r2 = (x**2).sum(axis=1)
            return 4 * mu[0] ** 2 * (1 + 2 * mu[0] * r2) * np.exp(2 * mu[0] * r2)

        return DirichletProblem(
            "rbd_cinf", (0.0, 0.0), (1.0, 1.0), Density(f, "4mu^2(1+2mu r^2)exp(2mu r^2)"), u,
            Stabilization(1.0, 0.0), exact_solution=u, param_dim=1, param_box=((0.1, 1.0),),
            xi_train=("0.1:0.02:1",), xi_test=("0.11:0.02:0.99",),
        )

    def u(x, mu):
        return np.exp((x**2).sum(axis=1) / 2)

    def f(x, mu):
        r2 = (x**2).sum(axis=1)
        return (1 + r2) * np.exp(r2)

    return DirichletProblem(
        "d_cinf", (0.0, 0.0), (1.0, 1.0), Density(f, "(1+|x|^2)exp(|x|^2)"), u,
        Stabilization(1.0, 0.0), exact_solution=u,
    )


def _d_c1(parametric: bool) -> DirichletProblem:
    def make(radius_of_mu):
        def u(x, mu):
            return 0.5 * np.maximum(_radial(x) - radius_of_mu(mu), 0.0) ** 2

        def f(x, mu):
            r = np.maximum(_radial(x), 1e-300)
            return np.maximum(1 - radius_of_mu(mu) / r, 0.0)

        return u, f

    if parametric:
        u, f = make(lambda mu: mu[0])
        return DirichletProblem(
            "rbd_c1", (0.0, 0.0), (1.0, 1.0), Density(f, "(1-mu/|x-c|)+"), u, Stabilization(1.0, 0.0),
            exact_solution=u, param_dim=1, param_box=((0.1, 0.5),),
            xi_train=("0.1:0.01:0.5",), xi_test=("0.105:0.01:0.495",),
        )
    u, f = make(lambda mu: 0.2)
    return DirichletProblem(
        "d_c1", (0.0, 0.0), (1.0, 1.0), Density(f, "(1-0.2/|x-c|)+"), u, Stabilization(10.0, 0.0),
        exact_solution=u,
    )


def _d_c0() -> DirichletProblem:
    def u(x, mu):
        return np.abs(x[:, 0])

    return DirichletProblem(
        "d_c0", (-1.0, -1.0), (1.0, 1.0), Density(lambda x, mu: np.zeros(x.shape[0]), "0"), u,
        Stabilization(200.0, 0.0), exact_solution=u,
    )


_REGISTRY: dict[str, Callable[[], object]] = {
    "t1": _test1,
    "t2": _test2,
    "t3": _test3,
    "t4": _test4,
    "rb1": _rb1,
    "rb1_printed": lambda: _rb1(printed=True),
    "rb2": _rb2,
    "rb3": _rb3,
    "rb4": _rb4,
    "rb5": _rb5,
    "d_cinf": lambda: _d_cinf(False),
    "d_c1": lambda: _d_c1(False),
    "d_c0": _d_c0,
    "rbd_cinf": lambda: _d_cinf(True),
    "rbd_c1": lambda: _d_c1(True),
}


def registry_names() -> list[str]:
    return list(_REGISTRY)


def _validate_positive(prob: TransportProblem, n: int = 400, seed: int = 0):
    rng = np.random.default_rng(seed)
    lo_y, hi_y = prob.target.bounding_box()
    ys = lo_y + (hi_y - lo_y) * rng.random((n, 2))
    ys = ys[prob.target.contains(ys)]
    xs = np.asarray(prob.source_lo) + (np.asarray(prob.source_hi) - np.asarray(prob.source_lo)) * rng.random((n, 2))
    mus = [np.zeros(0)]
    if prob.param_dim:
        box = np.asarray(prob.param_box, float)
        mus = [box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random(prob.param_dim) for _ in range(5)]
        mus += [box[:, 0], box[:, 1]]
    for mu in mus:
        if np.any(prob.f_x(xs, mu) <= 0) or np.any(prob.f_y(ys, mu) <= 0):
            raise ValueError(f"{prob.name}: density not positive at mu={mu}")


def builtin(name: str):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnknownProblem(f"unknown problem {name!r}; known: {', '.join(_REGISTRY)}") from None
    prob = factory()
    if isinstance(prob, TransportProblem):
        _validate_positive(prob)
    return prob


def parse_range(text: str) -> np.ndarray:
    """``"a:step:b"`` inclusive of ``b`` when ``(b - a)/step`` is integral; a bare number is a singleton."""
    parts = [p.strip() for p in str(text).split(":")]
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) != 3:
        raise ValueError(f"range {text!r} must look like a:step:b")
    a, step, b = (float(p) for p in parts)
    if step <= 0 or b < a:
        raise ValueError(f"range {text!r} needs step > 0 and b >= a")
    count = int(np.floor((b - a) / step + 1e-9)) + 1
    return a + step * np.arange(count)


def parameter_set(specs) -> list:
    """Tensor product of one range per parameter dimension, first dimension slowest."""
    axes = [parse_range(s) for s in specs]
    if not axes:
        return []
    mesh = np.meshgrid(*axes, indexing="ij")
    return [np.array(p) for p in np.column_stack([m.ravel() for m in mesh])]

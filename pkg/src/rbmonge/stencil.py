"""Narrow-stencil finite differences for the Monge-Ampere operator.

Two layers of ghost points surround the grid.  Their values are affine
functions of the on-grid values and of the Neumann data, so they are never
stored as unknowns: :func:`ghost_extension` returns a sparse matrix ``E``
mapping ``[u, phi]`` to the values on the padded grid, and every difference
operator is assembled as ``D @ E``.  Each residual row therefore depends on a
fixed, small set of grid values, which is what makes row-subsampled
evaluation cheap.

Neumann data ``phi`` is stored per *slot*: an edge point owns one slot (its
outward normal), a corner owns three (both edge normals and the diagonal).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps

from .errors import MissingPhi, NeedsGhost, NonFiniteResidual, NonpositiveDensity
from .grid import Grid

PAD = 2


@dataclass(frozen=True)
class Stabilization:
    """Numerical-moment weight ``alpha`` and numerical-viscosity weight ``beta``."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError(f"stabilization weights must be nonnegative, got {self}")


class Mode(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    CENTRAL = "central"


class Variant(enum.Enum):
    AVERAGED = "averaged"
    SKEWED = "skewed"


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ValueError(f"expected {self.grid.size} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def sample(cls, grid: Grid, fn) -> "GridFunction":
        return cls(grid, fn(grid.points))


@dataclass(frozen=True)
class HessianApprox:
    entries: np.ndarray
    variant: Variant


# ---------------------------------------------------------------------------
# index helpers
# ---------------------------------------------------------------------------


def ext_shape(grid: Grid) -> tuple[int, int]:
    return grid.n2 + 2 * PAD, grid.n1 + 2 * PAD


def ext_index(grid: Grid, i, j):
    """Flat index on the padded grid of 0-based (possibly ghost) ``(i, j)``."""
    return (np.asarray(j) + PAD) * (grid.n1 + 2 * PAD) + (np.asarray(i) + PAD)


@dataclass(frozen=True)
class PhiLayout:
    """Slot bookkeeping for the Neumann data of one grid."""

    point: np.ndarray  # flat index of the boundary point owning each slot
    normal: np.ndarray  # (n_slots, 2) unit normal of each slot
    kind: np.ndarray  # 0: x1 edge normal, 1: x2 edge normal, 2: corner diagonal
    left: np.ndarray  # slot of the x1 normal at (0, j), indexed by j
    right: np.ndarray
    bottom: np.ndarray  # slot of the x2 normal at (i, 0), indexed by i
    top: np.ndarray
    diag: dict  # corner name -> slot

    @property
    def size(self) -> int:
        return self.point.size


@lru_cache(maxsize=32)
def phi_layout(grid: Grid) -> PhiLayout:
    n1, n2 = grid.n_per_dim
    point, normal, kind = [], [], []
    left = np.full(n2, -1)
    right = np.full(n2, -1)
    bottom = np.full(n1, -1)
    top = np.full(n1, -1)
    diag = {}
    s2 = 1 / math.sqrt(2.0)
    for k in grid.boundary_indices:
        i, j = int(k % n1), int(k // n1)
        nx = -1.0 if i == 0 else (1.0 if i == n1 - 1 else 0.0)
        ny = -1.0 if j == 0 else (1.0 if j == n2 - 1 else 0.0)
        if nx:
            (left if nx < 0 else right)[j] = len(point)
            point.append(k), normal.append((nx, 0.0)), kind.append(0)
        if ny:
            (bottom if ny < 0 else top)[i] = len(point)
            point.append(k), normal.append((0.0, ny)), kind.append(1)
        if nx and ny:
            name = ("b" if ny < 0 else "t") + ("l" if nx < 0 else "r")
            diag[name] = len(point)
            point.append(k), normal.append((nx * s2, ny * s2)), kind.append(2)
    arr = [np.asarray(a) for a in (point, normal, kind)]
    for a in arr + [left, right, bottom, top]:
        a.setflags(write=False)
    return PhiLayout(arr[0], arr[1], arr[2], left, right, bottom, top, diag)


class BoundaryData:
    """Neumann data on the slots of :func:`phi_layout` (or on a subset of them)."""

    def __init__(self, grid: Grid, values, slots=None):
        self.grid = grid
        self.layout = phi_layout(grid)
        self.slots = np.arange(self.layout.size) if slots is None else np.asarray(slots)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != self.slots.shape:
            raise ValueError("one phi value per slot required")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "BoundaryData":
        """``fn(points, normals)`` -> normal derivative per slot."""
        lay = phi_layout(grid)
        return cls(grid, fn(grid.points[lay.point], lay.normal))

    def full(self) -> np.ndarray:
        """Values on every slot; raises :class:`MissingPhi` if any is absent."""
        if self.slots.size == self.layout.size and np.array_equal(self.slots, np.arange(self.layout.size)):
            return self.values
        missing = np.setdiff1d(np.arange(self.layout.size), self.slots)
        raise MissingPhi(f"phi undefined on {missing.size} boundary slot(s), first at point {self.layout.point[missing[0]]}")

    def at(self, flat: int) -> dict:
        """Slot values owned by one boundary point, keyed by slot kind."""
        own = np.flatnonzero(self.layout.point[self.slots] == flat)
        return {int(self.layout.kind[self.slots[s]]): float(self.values[s]) for s in own}


# ---------------------------------------------------------------------------
# ghost extension
# ---------------------------------------------------------------------------


class _Rows:
    """COO accumulator for sparse rows."""

    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, vals):
        rows, cols = np.broadcast_arrays(np.asarray(rows), np.asarray(cols))
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(np.broadcast_to(np.asarray(vals, float), rows.shape).ravel())

    def matrix(self, shape):
        if not self.r:
            return sps.csr_matrix(shape)
        m = sps.coo_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=shape)
        return m.tocsr()


@lru_cache(maxsize=32)
def ghost_extension(grid: Grid, bc: str = "neumann") -> sps.csr_matrix:
    """Sparse map from ``[u, phi]`` to the padded grid values.

    ``bc="neumann"``: first-layer ghosts from the central-difference Neumann
    relation (diagonal ghosts at corners from the diagonal relation); second
    layer from the zero normal derivative of the discrete Laplacian, i.e.
    ``u(-2) = 2 u(-1) - u(1) + h^2 (Lap u(2) - d_tt u(-1))`` where 1 is the
    boundary row, 2 the first interior row and -1, -2 the ghost layers.

    ``bc="dirichlet"``: boundary values are part of ``u``; one ghost layer
    next to each edge (corners excluded) by linear extrapolation across the
    boundary.  ``bc="dirichlet_laplacian"`` instead matches the discrete
    Laplacian at the boundary to the one at the first interior point, which
    is exact for quadratics.  Neither variant has phi columns.
    """
    n1, n2 = grid.n_per_dim
    h1, h2 = grid.spacing
    n_ext = (n1 + 2 * PAD) * (n2 + 2 * PAD)
    N = grid.size
    ii, jj = np.arange(n1), np.arange(n2)

    def X(i, j):
        return ext_index(grid, i, j)

    def U(i, j):
        return np.asarray(j) * n1 + np.asarray(i)

    if bc in ("dirichlet", "dirichlet_laplacian"):
        rows = _Rows()
        i_g, j_g = grid.index_arrays
        rows.add(X(i_g, j_g), np.arange(N), 1.0)
        jin, iin = jj[1:-1], ii[1:-1]
        if bc == "dirichlet":
            # zero second normal difference at the boundary: ghost = 2 u0 - u1
            normal, tangential = ((2.0, 0), (-1.0, 1)), ()
        else:
            # Lap u(boundary) = Lap u(first interior):
            # ghost = 3u0 - 3u1 + u2 + h_n^2 (d_tt u1 - d_tt u0)
            normal, tangential = ((3.0, 0), (-3.0, 1), (1.0, 2)), ((1.0, 1), (-1.0, 0))
        for i0, s in ((0, 1), (n1 - 1, -1)):
            g = X(i0 - s, jin)
            for c, off in normal:
                rows.add(g, U(i0 + s * off, jin), c)
            for c, off in tangential:
                for cc, dj in ((1.0, -1), (-2.0, 0), (1.0, 1)):
                    rows.add(g, U(i0 + s * off, jin + dj), c * cc * h1**2 / h2**2)
        for j0, s in ((0, 1), (n2 - 1, -1)):
            g = X(iin, j0 - s)
            for c, off in normal:
                rows.add(g, U(iin, j0 + s * off), c)
            for c, off in tangential:
                for cc, di in ((1.0, -1), (-2.0, 0), (1.0, 1)):
                    rows.add(g, U(iin + di, j0 + s * off), c * cc * h2**2 / h1**2)
        return rows.matrix((n_ext, N))

    if bc != "neumann":
        raise ValueError(f"unknown boundary treatment {bc!r}")

    lay = phi_layout(grid)
    ncol = N + lay.size
    d = math.hypot(h1, h2)
    first = _Rows()
    i_g, j_g = grid.index_arrays
    first.add(X(i_g, j_g), np.arange(N), 1.0)
    # first layer along the four edges (corner points included)
    first.add(X(-1, jj), U(1, jj), 1.0)
    first.add(X(-1, jj), N + lay.left, 2 * h1)
    first.add(X(n1, jj), U(n1 - 2, jj), 1.0)
    first.add(X(n1, jj), N + lay.right, 2 * h1)
    first.add(X(ii, -1), U(ii, 1), 1.0)
    first.add(X(ii, -1), N + lay.bottom, 2 * h2)
    first.add(X(ii, n2), U(ii, n2 - 2), 1.0)
    first.add(X(ii, n2), N + lay.top, 2 * h2)
    # diagonal ghosts at the corners
    for name, (gi, gj, mi, mj) in {
        "bl": (-1, -1, 1, 1),
        "br": (n1, -1, n1 - 2, 1),
        "tl": (-1, n2, 1, n2 - 2),
        "tr": (n1, n2, n1 - 2, n2 - 2),
    }.items():
        first.add(X(gi, gj), U(mi, mj), 1.0)
        first.add(X(gi, gj), N + lay.diag[name], 2 * d)
    E1 = first.matrix((n_ext, ncol))

    # second layer as combinations of padded values already defined by E1
    comb = _Rows()
    r = h1**2 / h2**2
    for i0, s in ((0, 1), (n1 - 1, -1)):
        g2 = X(i0 - 2 * s, jj)
        # -u(bdry) + 2 u(ghost1)
        comb.add(g2, X(i0, jj), -1.0)
        comb.add(g2, X(i0 - s, jj), 2.0)
        # - h1^2 d22 u(ghost1)
        for cc, dj in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(i0 - s, jj + dj), -cc * r)
        # + h1^2 (d11 + d22) u(first interior)
        for cc, di in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(i0 + s + di, jj), cc)
        for cc, dj in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(i0 + s, jj + dj), cc * r)
    r = h2**2 / h1**2
    for j0, s in ((0, 1), (n2 - 1, -1)):
        g2 = X(ii, j0 - 2 * s)
        comb.add(g2, X(ii, j0), -1.0)
        comb.add(g2, X(ii, j0 - s), 2.0)
        for cc, di in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(ii + di, j0 - s), -cc * r)
        for cc, dj in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(ii, j0 + s + dj), cc)
        for cc, di in ((1.0, -1), (-2.0, 0), (1.0, 1)):
            comb.add(g2, X(ii + di, j0 + s), cc * r)
    C = comb.matrix((n_ext, n_ext))
    E = (E1 + C @ E1).tocsr()
    E.sort_indices()
    return E


@lru_cache(maxsize=32)
def defined_mask(grid: Grid, bc: str = "neumann") -> np.ndarray:
    E = ghost_extension(grid, bc)
    mask = np.diff(E.indptr) > 0
    return mask.reshape(ext_shape(grid))


def extend(grid: Grid, u, phi=None, bc: str = "neumann") -> np.ndarray:
    """Padded 2-D array of grid and ghost values; undefined ghosts are NaN."""
    u = np.asarray(u, dtype=float)
    if bc == "neumann":
        if phi is None:
            raise MissingPhi("Neumann ghost elimination needs phi")
        p = phi.full() if isinstance(phi, BoundaryData) else np.asarray(phi, dtype=float)
        vec = np.concatenate([u, p])
    else:
        vec = u
    out = (ghost_extension(grid, bc) @ vec).reshape(ext_shape(grid))
    out[~defined_mask(grid, bc)] = np.nan
    return out


def eliminate_ghosts(u: GridFunction, phi: BoundaryData, theta_boundary) -> dict:
    """Ghost values around a boundary point, keyed by 0-based ``(i, j)``.

    Returns every ghost within two steps of ``theta_boundary`` that the
    extension defines.
    """
    grid = u.grid
    cls = grid.classify(theta_boundary)
    if not cls.is_boundary:
        raise ValueError(f"theta={tuple(theta_boundary)} is not a boundary point")
    lay = phi_layout(grid)
    flat = grid.flat_of(theta_boundary)
    need = np.flatnonzero(lay.point == flat)
    if not np.all(np.isin(need, phi.slots)):
        raise MissingPhi(f"phi missing at boundary point {tuple(theta_boundary)}")
    vals = np.zeros(lay.size)
    vals[phi.slots] = phi.values
    ext = extend(grid, u.values, vals)
    i0, j0 = theta_boundary[0] - 1, theta_boundary[1] - 1
    out = {}
    for di in range(-2, 3):
        for dj in range(-2, 3):
            i, j = i0 + di, j0 + dj
            on_grid = 0 <= i < grid.n1 and 0 <= j < grid.n2
            if on_grid or not (-PAD <= i < grid.n1 + PAD and -PAD <= j < grid.n2 + PAD):
                continue
            v = ext[j + PAD, i + PAD]
            if np.isfinite(v):
                out[(i, j)] = float(v)
    return out


# ---------------------------------------------------------------------------
# pointwise difference quotients
# ---------------------------------------------------------------------------


def _val(u: GridFunction, i: int, j: int, ext: Optional[np.ndarray]) -> float:
    g = u.grid
    if 0 <= i < g.n1 and 0 <= j < g.n2:
        return u.values[j * g.n1 + i]
    if ext is not None and -PAD <= i < g.n1 + PAD and -PAD <= j < g.n2 + PAD:
        v = ext[j + PAD, i + PAD]
        if np.isfinite(v):
            return float(v)
    raise NeedsGhost(f"stencil needs value at ({i}, {j}) outside the grid")


def _shift(axis: int, k: int) -> tuple[int, int]:
    return (k, 0) if axis == 1 else (0, k)


def diff(u: GridFunction, theta, axis: int, mode, ext=None) -> float:
    """One-dimensional difference quotient along ``axis`` (1 or 2)."""
    mode = Mode(mode)
    i, j = theta[0] - 1, theta[1] - 1
    h = u.grid.spacing[axis - 1]
    (pi, pj), (mi, mj) = _shift(axis, 1), _shift(axis, -1)
    c = _val(u, i, j, ext)
    if mode is Mode.FORWARD:
        return (_val(u, i + pi, j + pj, ext) - c) / h
    if mode is Mode.BACKWARD:
        return (c - _val(u, i + mi, j + mj, ext)) / h
    return (_val(u, i + pi, j + pj, ext) - _val(u, i + mi, j + mj, ext)) / (2 * h)


def _d(u, i, j, axis, sign, ext):
    h = u.grid.spacing[axis - 1]
    si, sj = _shift(axis, 1)
    if sign > 0:
        return lambda a, b: (_val(u, a + si, b + sj, ext) - _val(u, a, b, ext)) / h
    return lambda a, b: (_val(u, a, b, ext) - _val(u, a - si, b - sj, ext)) / h


def _composed(u, theta, mu_sign, nu_sign, ext):
    """Matrix ``D^{mu nu}_{ij} = d_{x_j}^{nu} d_{x_i}^{mu} u`` at ``theta``."""
    i0, j0 = theta[0] - 1, theta[1] - 1
    h = u.grid.spacing
    out = np.empty((2, 2))
    for a in (1, 2):
        inner = _d(u, i0, j0, a, mu_sign, ext)
        for b in (1, 2):
            sb = _shift(b, 1)
            if nu_sign > 0:
                out[a - 1, b - 1] = (inner(i0 + sb[0], j0 + sb[1]) - inner(i0, j0)) / h[b - 1]
            else:
                out[a - 1, b - 1] = (inner(i0, j0) - inner(i0 - sb[0], j0 - sb[1])) / h[b - 1]
    return out


def hessian(u: GridFunction, theta, variant, ext=None) -> HessianApprox:
    variant = Variant(variant)
    if variant is Variant.AVERAGED:
        m = 0.5 * (_composed(u, theta, +1, -1, ext) + _composed(u, theta, -1, +1, ext))
        m[0, 1] = m[1, 0] = 0.5 * (m[0, 1] + m[1, 0])  # equal in exact arithmetic
    else:
        m = 0.5 * (_composed(u, theta, +1, +1, ext) + _composed(u, theta, -1, -1, ext))
    return HessianApprox(m, variant)


def laplacian9(u: GridFunction, theta, ext=None) -> float:
    """Compact nine-point Laplacian for ``h1 == h2``; five-point otherwise."""
    i, j = theta[0] - 1, theta[1] - 1
    h1, h2 = u.grid.spacing
    if math.isclose(h1, h2, rel_tol=1e-12):
        c = _val(u, i, j, ext)
        cross = sum(_val(u, i + a, j + b, ext) for a, b in ((1, 0), (-1, 0), (0, 1), (0, -1)))
        corner = sum(_val(u, i + a, j + b, ext) for a, b in ((1, 1), (-1, 1), (1, -1), (-1, -1)))
        return (4 * cross + corner - 20 * c) / (6 * h1 * h1)
    c = _val(u, i, j, ext)
    d11 = (_val(u, i + 1, j, ext) - 2 * c + _val(u, i - 1, j, ext)) / h1**2
    d22 = (_val(u, i, j + 1, ext) - 2 * c + _val(u, i, j - 1, ext)) / h2**2
    return d11 + d22


# ---------------------------------------------------------------------------
# assembled operators
# ---------------------------------------------------------------------------

FUNCTIONALS = ("g1", "g2", "h11", "h22", "h12", "moment", "visc")


def _stencils(h1: float, h2: float) -> dict:
    """Offsets -> weights of every linear functional entering the operator."""
    hh = h1 * h2
    d_pm = {(1, 0): 1, (0, 0): -1, (1, -1): -1, (0, -1): 1}  # d2^- d1^+
    d_mp = {(0, 1): 1, (-1, 1): -1, (0, 0): -1, (-1, 0): 1}  # d2^+ d1^-
    h12 = {}
    for st in (d_pm, d_mp):
        for k, v in st.items():
            h12[k] = h12.get(k, 0.0) + 0.5 * v / hh
    d11 = {(1, 0): 1 / h1**2, (0, 0): -2 / h1**2, (-1, 0): 1 / h1**2}
    d22 = {(0, 1): 1 / h2**2, (0, 0): -2 / h2**2, (0, -1): 1 / h2**2}
    # trace of (skewed - averaged): sum_i (h_i^2 / 2) d_i^4
    moment = {}
    for (a, b), h in (((1, 0), h1), ((0, 1), h2)):
        for k, w in ((-2, 1), (-1, -4), (0, 6), (1, -4), (2, 1)):
            key = (k * a, k * b)
            moment[key] = moment.get(key, 0.0) + 0.5 * w / h**2
    visc = {}
    for st, h in ((d11, h1), (d22, h2)):
        for k, v in st.items():
            visc[k] = visc.get(k, 0.0) + h * v
    return {
        "g1": {(1, 0): 0.5 / h1, (-1, 0): -0.5 / h1},
        "g2": {(0, 1): 0.5 / h2, (0, -1): -0.5 / h2},
        "h11": d11,
        "h22": d22,
        "h12": h12,
        "moment": moment,
        "visc": visc,
    }


def skewed_offdiag_stencil(h1: float, h2: float) -> dict:
    """Weights of ``(D^{++}_{12} + D^{--}_{12}) / 2``; enters only the footprint."""
    hh = h1 * h2
    out = {}
    for st in ({(1, 1): 1, (0, 1): -1, (1, 0): -1, (0, 0): 1}, {(0, 0): 1, (-1, 0): -1, (0, -1): -1, (-1, -1): 1}):
        for k, v in st.items():
            out[k] = out.get(k, 0.0) + 0.5 * v / hh
    return out


def _padded_operator(grid: Grid, stencil: dict) -> sps.csr_matrix:
    i, j = grid.index_arrays
    rows = _Rows()
    for (di, dj), w in stencil.items():
        rows.add(np.arange(grid.size), ext_index(grid, i + di, j + dj), w)
    return rows.matrix((grid.size, np.prod(ext_shape(grid))))


@dataclass
class Operators:
    """Sparse linear functionals, split into u- and phi-columns.

    ``rows`` are the grid points the rows belong to; ``cols`` the grid points
    the u-columns refer to; ``slots`` the phi slots of the phi-columns.
    """

    grid: Grid
    bc: str
    rows: np.ndarray
    cols: np.ndarray
    slots: np.ndarray
    u_part: dict
    phi_part: dict

    @property
    def n_rows(self) -> int:
        return self.rows.size

    @cached_property
    def dense_u_part(self) -> dict:
        """Dense copies of the u-parts, used for Jacobians of small row sets."""
        return {k: m.toarray() for k, m in self.u_part.items()}

    def values(self, u, phi=None) -> dict:
        out = {}
        for k in FUNCTIONALS:
            v = self.u_part[k] @ u
            if phi is not None and self.slots.size:
                v = v + self.phi_part[k] @ phi
            out[k] = v
        return out

    def restrict(self, rows) -> "Operators":
        """Rows at ``rows`` with columns compressed to the entries they touch."""
        rows = np.asarray(rows, dtype=np.int64)
        pos = np.searchsorted(self.rows, rows)
        if np.any(pos >= self.rows.size) or np.any(self.rows[pos] != rows):
            raise ValueError("requested rows not available in this operator")
        up = {k: m[pos] for k, m in self.u_part.items()}
        pp = {k: m[pos] for k, m in self.phi_part.items()}
        ucols = np.unique(np.concatenate([m.indices for m in up.values()]))
        pcols = np.unique(np.concatenate([m.indices for m in pp.values()])) if self.slots.size else np.empty(0, int)
        up = {k: m[:, ucols] for k, m in up.items()}
        pp = {k: m[:, pcols] for k, m in pp.items()}
        return Operators(self.grid, self.bc, self.rows[pos], self.cols[ucols], self.slots[pcols], up, pp)

    def align_columns(self, cols) -> "Operators":
        """Re-index the u-columns onto the sorted superset ``cols``."""
        cols = np.asarray(cols, dtype=np.int64)
        pos = np.searchsorted(cols, self.cols)
        if np.any(pos >= cols.size) or np.any(cols[pos] != self.cols):
            raise ValueError("column superset does not contain the operator footprint")
        up = {}
        for k, m in self.u_part.items():
            m = m.tocoo()
            up[k] = sps.csr_matrix((m.data, (m.row, pos[m.col])), shape=(m.shape[0], cols.size))
        return Operators(self.grid, self.bc, self.rows, cols, self.slots, up, self.phi_part)


@lru_cache(maxsize=16)
def operators(grid: Grid, bc: str = "neumann") -> Operators:
    E = ghost_extension(grid, bc)
    N = grid.size
    st = _stencils(*grid.spacing)
    up, pp = {}, {}
    for k in FUNCTIONALS:
        m = (_padded_operator(grid, st[k]) @ E).tocsr()
        m.sort_indices()
        up[k] = m[:, :N].tocsr()
        pp[k] = m[:, N:].tocsr()
    slots = np.arange(E.shape[1] - N)
    return Operators(grid, bc, np.arange(N), np.arange(N), slots, up, pp)


@lru_cache(maxsize=16)
def dependency_pattern(grid: Grid, bc: str = "neumann") -> sps.csr_matrix:
    """Boolean pattern: row k lists every grid value its residual row reads."""
    ops = operators(grid, bc)
    E = ghost_extension(grid, bc)
    skew = (_padded_operator(grid, skewed_offdiag_stencil(*grid.spacing)) @ E)[:, : grid.size]
    pat = abs(skew)
    for m in ops.u_part.values():
        pat = pat + abs(m)
    pat = (pat + sps.identity(grid.size, format="csr")).tocsr()
    pat.data[:] = 1.0
    pat.sort_indices()
    return pat


def laplacian_operator(grid: Grid, bc: str = "neumann", nine_point: bool = True):
    """Discrete Laplacian at every grid point, split into (u, phi) parts."""
    h1, h2 = grid.spacing
    if nine_point and math.isclose(h1, h2, rel_tol=1e-12):
        w = 1 / (6 * h1 * h1)
        st = {(0, 0): -20 * w}
        for k in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            st[k] = 4 * w
        for k in ((1, 1), (-1, 1), (1, -1), (-1, -1)):
            st[k] = w
    else:
        st = {(0, 0): -2 / h1**2 - 2 / h2**2, (1, 0): 1 / h1**2, (-1, 0): 1 / h1**2, (0, 1): 1 / h2**2, (0, -1): 1 / h2**2}
    m = (_padded_operator(grid, st) @ ghost_extension(grid, bc)).tocsr()
    return m[:, : grid.size].tocsr(), m[:, grid.size :].tocsr()


@lru_cache(maxsize=16)
def gradient_operator(grid: Grid) -> tuple[sps.csr_matrix, sps.csr_matrix]:
    """Discrete gradient at every grid point without ghosts.

    Central differences inside; at the boundary the normal derivative uses the
    one-sided three-point formula and the tangential one is central (one-sided
    as well at corners).
    """
    n1, n2 = grid.n_per_dim
    h = grid.spacing
    i, j = grid.index_arrays
    mats = []
    for axis, (idx, n) in enumerate(((i, n1), (j, n2))):
        rows = _Rows()
        step = 1 if axis == 0 else n1
        k = np.arange(grid.size)
        lo, hi = idx == 0, idx == n - 1
        mid = ~(lo | hi)
        rows.add(k[mid], k[mid] + step, 0.5 / h[axis])
        rows.add(k[mid], k[mid] - step, -0.5 / h[axis])
        for c, off in ((-1.5, 0), (2.0, 1), (-0.5, 2)):
            rows.add(k[lo], k[lo] + off * step, c / h[axis])
            rows.add(k[hi], k[hi] - off * step, -c / h[axis])
        m = rows.matrix((grid.size, grid.size))
        m.sort_indices()
        mats.append(m)
    return mats[0], mats[1]


def boundary_gradient_operator(grid: Grid, slots=None):
    """Rows of :func:`gradient_operator` at the owning point of each phi slot."""
    lay = phi_layout(grid)
    slots = np.arange(lay.size) if slots is None else np.asarray(slots)
    g1, g2 = gradient_operator(grid)
    pts = lay.point[slots]
    return g1[pts], g2[pts]


# ---------------------------------------------------------------------------
# residual and Jacobian
# ---------------------------------------------------------------------------

DensityHat = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _ratio(fx, fyhat, grad):
    fy, dfy = fyhat(grad)
    if np.any(~np.isfinite(fy)):
        raise NonFiniteResidual("extended target density is not finite")
    if np.any(fy <= 0):
        raise NonpositiveDensity("extended target density evaluated <= 0")
    return fx / fy, fy, dfy


def ma_residual(ops: Operators, u, sigma: float, phi, fx, fyhat: DensityHat, stab: Stabilization):
    """Residual of the stabilised operator at every row of ``ops``.

    ``fx`` holds the source density at the row points and ``fyhat`` maps
    gradients to ``(density, density gradient)`` of the extended target.
    Returns ``(residual, functional values)``.
    """
    vals = ops.values(u, phi)
    grad = np.column_stack([vals["g1"], vals["g2"]])
    ratio, _, _ = _ratio(fx, fyhat, grad)
    det = vals["h11"] * vals["h22"] - vals["h12"] ** 2
    res = sigma * ratio - det + 2 * stab.alpha * vals["moment"] - stab.beta * vals["visc"]
    if not np.all(np.isfinite(res)):
        raise NonFiniteResidual("residual has non-finite entries")
    return res, vals


def ma_jacobian(ops: Operators, vals: dict, sigma: float, fx, fyhat: DensityHat, stab: Stabilization, dense: bool = False):
    """``(dR/du, dR/dsigma)`` for the rows of ``ops``.

    dR/du is sparse CSR, or a dense array with ``dense=True``.
    """
    grad = np.column_stack([vals["g1"], vals["g2"]])
    ratio, fy, dfy = _ratio(fx, fyhat, grad)
    coef = -sigma * ratio / fy
    if dense:
        # scipy.sparse call overhead dominates for a handful of rows
        up = ops.dense_u_part
        J = (
            (coef * dfy[:, 0])[:, None] * up["g1"]
            + (coef * dfy[:, 1])[:, None] * up["g2"]
            - vals["h22"][:, None] * up["h11"]
            - vals["h11"][:, None] * up["h22"]
            + (2 * vals["h12"])[:, None] * up["h12"]
        )
        if stab.alpha:
            J = J + 2 * stab.alpha * up["moment"]
        if stab.beta:
            J = J - stab.beta * up["visc"]
        return J, ratio
    up = ops.u_part
    D = sps.diags
    J = (
        D(coef * dfy[:, 0]) @ up["g1"]
        + D(coef * dfy[:, 1]) @ up["g2"]
        - D(vals["h22"]) @ up["h11"]
        - D(vals["h11"]) @ up["h22"]
        + D(2 * vals["h12"]) @ up["h12"]
    )
    if stab.alpha:
        J = J + 2 * stab.alpha * up["moment"]
    if stab.beta:
        J = J - stab.beta * up["visc"]
    return J.tocsr(), ratio


def density_hat(prob, mu) -> DensityHat:
    from .problem import extended_fy, extended_fy_grad

    return lambda y: (extended_fy(prob, y, mu), extended_fy_grad(prob, y, mu))


def ma_residual_row(u: GridFunction, sigma: float, phi: BoundaryData, theta, stab: Stabilization, prob, mu) -> float:
    """Pointwise evaluation of the stabilised operator at ``theta``.

    Uses the difference quotients of this module directly (independently of
    the assembled sparse operators) with ghosts taken from :func:`extend`.
    """
    from .problem import extended_fy

    grid = u.grid
    ext = None
    if grid.classify(theta).is_boundary or _near_boundary(grid, theta):
        ext = extend(grid, u.values, phi)
    hb = hessian(u, theta, Variant.AVERAGED, ext).entries
    ht = hessian(u, theta, Variant.SKEWED, ext).entries
    g = np.array([diff(u, theta, a, Mode.CENTRAL, ext) for a in (1, 2)])
    x = grid.point_of(theta)
    fy = float(extended_fy(prob, g, mu))
    if fy <= 0:
        raise NonpositiveDensity(f"extended target density {fy} at gradient {g}")
    fx = float(prob.f_x(x[None], mu)[0])
    visc = sum(diff(u, theta, a, Mode.FORWARD, ext) - diff(u, theta, a, Mode.BACKWARD, ext) for a in (1, 2))
    val = sigma * fx / fy - np.linalg.det(hb) + 2 * stab.alpha * np.trace(ht - hb) - stab.beta * visc
    if not np.isfinite(val):
        raise NonFiniteResidual(f"residual at {tuple(theta)} is not finite")
    return float(val)


def _near_boundary(grid: Grid, theta) -> bool:
    return min(theta[0] - 1, theta[1] - 1, grid.n1 - theta[0], grid.n2 - theta[1]) < PAD


def ma_jacobian_row(u: GridFunction, sigma: float, phi: BoundaryData, theta, stab: Stabilization, prob, mu):
    """Exact derivatives of the residual at ``theta``.

    Returns ``({flat index: dR/du}, dR/dsigma)``.
    """
    grid = u.grid
    k = grid.flat_of(theta)
    ops = operators(grid).restrict([k])
    full = np.zeros(ops.slots.size)
    have = dict(zip(phi.slots.tolist(), phi.values.tolist()))
    for n, s in enumerate(ops.slots):
        if int(s) not in have:
            raise MissingPhi(f"phi slot {s} needed at {tuple(theta)}")
        full[n] = have[int(s)]
    fx = prob.f_x(grid.points[[k]], mu)
    fyhat = density_hat(prob, mu)
    _, vals = ma_residual(ops, u.values[ops.cols], sigma, full, fx, fyhat, stab)
    J, ratio = ma_jacobian(ops, vals, sigma, fx, fyhat, stab)
    row = J.tocoo()
    return {int(ops.cols[c]): float(v) for c, v in zip(row.col, row.data)}, float(ratio[0])

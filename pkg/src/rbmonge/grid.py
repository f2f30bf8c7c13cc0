"""Uniform tensor grid over a rectangle.

Points are numbered row-major with the first coordinate running fastest:
``flat = (theta2 - 1) * n1 + (theta1 - 1)`` for the 1-based multi-index
``theta``.  Ghost points are never stored here; see :mod:`rbmonge.stencil`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateDomain, IndexOutOfRange, TooCoarse

MIN_POINTS = 5


class BoundaryClass(enum.Enum):
    INTERIOR = "interior"
    EDGE_LEFT = "edge_left"
    EDGE_RIGHT = "edge_right"
    EDGE_BOTTOM = "edge_bottom"
    EDGE_TOP = "edge_top"
    CORNER_BL = "corner_bl"
    CORNER_BR = "corner_br"
    CORNER_TL = "corner_tl"
    CORNER_TR = "corner_tr"

    @property
    def is_corner(self) -> bool:
        return self.name.startswith("CORNER")

    @property
    def is_boundary(self) -> bool:
        return self is not BoundaryClass.INTERIOR


@dataclass(frozen=True)
class Grid:
    bounds_lo: tuple[float, float]
    bounds_hi: tuple[float, float]
    n_per_dim: tuple[int, int]
    spacing: tuple[float, float] = field(init=False)

    def __post_init__(self):
        lo = tuple(float(a) for a in self.bounds_lo)
        hi = tuple(float(b) for b in self.bounds_hi)
        n = tuple(int(k) for k in self.n_per_dim)
        if len(lo) != 2 or len(hi) != 2 or len(n) != 2:
            raise ValueError("only two-dimensional grids are supported")
        if any(b <= a for a, b in zip(lo, hi)):
            raise DegenerateDomain(f"empty box: lo={lo}, hi={hi}")
        if any(k < MIN_POINTS for k in n):
            raise TooCoarse(f"need at least {MIN_POINTS} points per axis, got {n}")
        object.__setattr__(self, "bounds_lo", lo)
        object.__setattr__(self, "bounds_hi", hi)
        object.__setattr__(self, "n_per_dim", n)
        object.__setattr__(
            self, "spacing", tuple((b - a) / (k - 1) for a, b, k in zip(lo, hi, n))
        )

    @property
    def n1(self) -> int:
        return self.n_per_dim[0]

    @property
    def n2(self) -> int:
        return self.n_per_dim[1]

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    # -- index arithmetic -------------------------------------------------

    def _check_theta(self, theta):
        t1, t2 = int(theta[0]), int(theta[1])
        if not (1 <= t1 <= self.n1 and 1 <= t2 <= self.n2):
            raise IndexOutOfRange(f"theta={tuple(theta)} outside grid {self.n_per_dim}")
        return t1, t2

    def flat_of(self, theta) -> int:
        t1, t2 = self._check_theta(theta)
        return (t2 - 1) * self.n1 + (t1 - 1)

    def theta_of(self, flat: int) -> tuple[int, int]:
        k = int(flat)
        if not 0 <= k < self.size:
            raise IndexOutOfRange(f"flat index {k} outside [0, {self.size})")
        return (k % self.n1 + 1, k // self.n1 + 1)

    def point_of(self, theta) -> np.ndarray:
        t1, t2 = self._check_theta(theta)
        a, h = self.bounds_lo, self.spacing
        return np.array([a[0] + (t1 - 1) * h[0], a[1] + (t2 - 1) * h[1]])

    # -- whole-grid arrays -------------------------------------------------

    @cached_property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        a, h = self.bounds_lo, self.spacing
        return (a[0] + h[0] * np.arange(self.n1), a[1] + h[1] * np.arange(self.n2))

    @cached_property
    def points(self) -> np.ndarray:
        """``(N, 2)`` array of grid coordinates in flat order."""
        x1, x2 = np.meshgrid(*self.axes, indexing="xy")
        pts = np.column_stack([x1.ravel(), x2.ravel()])
        pts.setflags(write=False)
        return pts

    @cached_property
    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """0-based ``(i, j)`` index of every flat point."""
        k = np.arange(self.size)
        return k % self.n1, k // self.n1

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        i, j = self.index_arrays
        return (i == 0) | (i == self.n1 - 1) | (j == 0) | (j == self.n2 - 1)

    @cached_property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    def classify(self, theta) -> BoundaryClass:
        t1, t2 = self._check_theta(theta)
        left, right = t1 == 1, t1 == self.n1
        bottom, top = t2 == 1, t2 == self.n2
        if bottom and left:
            return BoundaryClass.CORNER_BL
        if bottom and right:
            return BoundaryClass.CORNER_BR
        if top and left:
            return BoundaryClass.CORNER_TL
        if top and right:
            return BoundaryClass.CORNER_TR
        if left:
            return BoundaryClass.EDGE_LEFT
        if right:
            return BoundaryClass.EDGE_RIGHT
        if bottom:
            return BoundaryClass.EDGE_BOTTOM
        if top:
            return BoundaryClass.EDGE_TOP
        return BoundaryClass.INTERIOR

    def is_refinement_of(self, coarse: "Grid") -> bool:
        """True if every node of ``coarse`` is also a node of this grid."""
        if self.bounds_lo != coarse.bounds_lo or self.bounds_hi != coarse.bounds_hi:
            return False
        return all((f - 1) % (c - 1) == 0 for f, c in zip(self.n_per_dim, coarse.n_per_dim))

    def restriction_indices(self, coarse: "Grid") -> np.ndarray:
        """Flat indices of this grid that coincide with the nodes of ``coarse``."""
        if not self.is_refinement_of(coarse):
            raise ValueError(f"grid {self.n_per_dim} is not nested over {coarse.n_per_dim}")
        s1 = (self.n1 - 1) // (coarse.n1 - 1)
        s2 = (self.n2 - 1) // (coarse.n2 - 1)
        ci, cj = coarse.index_arrays
        return (cj * s2) * self.n1 + ci * s1

    def to_dict(self) -> dict:
        return {
            "bounds_lo": list(self.bounds_lo),
            "bounds_hi": list(self.bounds_hi),
            "n_per_dim": list(self.n_per_dim),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["bounds_lo"]), tuple(d["bounds_hi"]), tuple(d["n_per_dim"]))


def make_grid(bounds_lo, bounds_hi, n_per_dim) -> Grid:
    if np.isscalar(n_per_dim):
        n_per_dim = (int(n_per_dim), int(n_per_dim))
    return Grid(tuple(bounds_lo), tuple(bounds_hi), tuple(n_per_dim))


def classify(grid: Grid, theta) -> BoundaryClass:
    return grid.classify(theta)


def stencil_closure(grid: Grid, flat_indices) -> np.ndarray:
    """Grid points whose values enter the residual rows at ``flat_indices``.

    Ghost values are expressed through on-grid values before the footprint is
    taken, so boundary rows pull in points up to two steps inward.  The
    result is sorted and free of duplicates.
    """
    from .stencil import dependency_pattern

    idx = np.asarray(flat_indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return np.empty(0, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= grid.size:
        raise IndexOutOfRange(f"indices outside [0, {grid.size})")
    pattern = dependency_pattern(grid)
    cols = pattern[np.unique(idx)].indices
    return np.union1d(cols, idx).astype(np.int64)

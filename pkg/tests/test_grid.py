import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmonge.errors import DegenerateDomain, IndexOutOfRange, TooCoarse
from rbmonge.grid import BoundaryClass, Grid, make_grid, stencil_closure


def test_grid_spacing_15():
    g = make_grid((-0.5, -0.5), (0.5, 0.5), (15, 15))
    assert g.spacing == (1 / 14, 1 / 14)
    assert g.size == 225


def test_midpoint_and_rectangular_spacing():
    g = make_grid((0, 0), (1, 1), 5)
    np.testing.assert_array_equal(g.point_of((3, 3)), [0.5, 0.5])
    assert make_grid((0, 0), (1, 2), (5, 9)).spacing == (0.25, 0.25)


def test_construction_errors():
    with pytest.raises(DegenerateDomain):
        make_grid((0, 0), (0, 1), 5)
    with pytest.raises(TooCoarse):
        make_grid((0, 0), (1, 1), (4, 5))


@pytest.mark.parametrize(
    "theta, kind",
    [((1, 1), BoundaryClass.CORNER_BL), ((3, 1), BoundaryClass.EDGE_BOTTOM), ((3, 3), BoundaryClass.INTERIOR),
     ((5, 5), BoundaryClass.CORNER_TR), ((1, 3), BoundaryClass.EDGE_LEFT), ((5, 2), BoundaryClass.EDGE_RIGHT)],
)
def test_classify(theta, kind):
    assert make_grid((0, 0), (1, 1), 5).classify(theta) is kind


def test_classify_out_of_range():
    g = make_grid((0, 0), (1, 1), 5)
    with pytest.raises(IndexOutOfRange):
        g.classify((0, 1))
    with pytest.raises(IndexOutOfRange):
        g.theta_of(25)


def test_boundary_counts():
    g = make_grid((0, 0), (1, 1), (7, 9))
    kinds = [g.classify(g.theta_of(k)) for k in range(g.size)]
    assert sum(k.is_corner for k in kinds) == 4
    edges = sum(k.is_boundary and not k.is_corner for k in kinds)
    assert edges == 2 * (7 - 2) + 2 * (9 - 2)
    assert g.boundary_indices.size == edges + 4


def test_interior_footprint_is_thirteen_points():
    g = make_grid((0, 0), (1, 1), 31)
    k = g.flat_of((15, 15))
    cl = stencil_closure(g, [k])
    assert cl.size == 13
    i, j = g.index_arrays
    di, dj = i[cl] - 14, j[cl] - 14
    assert set(zip(di.tolist(), dj.tolist())) == (
        {(a, 0) for a in range(-2, 3)} | {(0, b) for b in range(-2, 3)} | {(1, 1), (1, -1), (-1, 1), (-1, -1)}
    )


def test_closure_trivial_cases():
    g = make_grid((0, 0), (1, 1), 9)
    assert stencil_closure(g, []).size == 0
    np.testing.assert_array_equal(stencil_closure(g, np.arange(g.size)), np.arange(g.size))
    with pytest.raises(IndexOutOfRange):
        stencil_closure(g, [g.size])


def test_boundary_rows_reach_two_steps_inward():
    g = make_grid((0, 0), (1, 1), 11)
    cl = stencil_closure(g, [g.flat_of((1, 6))])
    i, _ = g.index_arrays
    assert i[cl].max() >= 2


def test_refinement_restriction():
    fine, coarse = make_grid((0, 0), (1, 1), 21), make_grid((0, 0), (1, 1), 11)
    assert fine.is_refinement_of(coarse)
    idx = fine.restriction_indices(coarse)
    np.testing.assert_allclose(fine.points[idx], coarse.points, atol=1e-15)
    assert not make_grid((0, 0), (1, 1), 20).is_refinement_of(coarse)


def test_dict_round_trip():
    g = make_grid((-0.5, 0), (0.5, 2), (7, 13))
    assert Grid.from_dict(g.to_dict()) == g


sizes = st.integers(5, 14)


@given(sizes, sizes)
def test_flat_theta_round_trip(n1, n2):
    g = make_grid((0, 0), (1, 1), (n1, n2))
    for k in range(g.size):
        assert g.flat_of(g.theta_of(k)) == k


@given(sizes, sizes)
def test_classify_matches_geometry(n1, n2):
    g = make_grid((-1, 0), (2, 1), (n1, n2))
    lo, hi = np.array(g.bounds_lo), np.array(g.bounds_hi)
    for k in range(g.size):
        th = g.theta_of(k)
        p = g.point_of(th)
        inside = bool(np.all(p > lo) and np.all(p < hi))
        assert (g.classify(th) is BoundaryClass.INTERIOR) == inside


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 80), max_size=6), st.lists(st.integers(0, 80), max_size=6))
def test_closure_monotone_and_extensive(a, b):
    g = make_grid((0, 0), (1, 1), 9)
    ca = stencil_closure(g, a)
    assert set(a) <= set(ca.tolist())
    cab = stencil_closure(g, a + b)
    assert set(ca.tolist()) <= set(cab.tolist())
    assert np.all(np.diff(cab) > 0)

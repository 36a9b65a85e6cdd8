import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from nnreach.statespace import (CellNotFoundError, GridError, HyperRect, OutOfBoundsError, Polytope,
                                RefinementFloorError, build_uniform_grid, cells_intersecting, dump_grid,
                                grid_from_edges, load_grid, locate, locate_many, pairs_intersecting,
                                refine_cell, refine_cells, rows_intersecting)

UNIT = HyperRect((0.0, 0.0), (1.0, 1.0))


def lp_feasible(poly: Polytope, lo, hi) -> bool:
    """Independent oracle: does {x : A x <= b, lo <= x <= hi} have a point?"""
    d = poly.dimension
    res = linprog(np.zeros(d), A_ub=poly.normals, b_ub=poly.offsets + 1e-12,
                  bounds=list(zip(np.asarray(lo) - 1e-12, np.asarray(hi) + 1e-12)), method="highs")
    return res.status == 0


# --------------------------------------------------------------------------- HyperRect / Polytope

def test_hyperrect_validation():
    with pytest.raises(ValueError):
        HyperRect((0.0, 1.0), (1.0, 0.5))
    with pytest.raises(ValueError):
        HyperRect((0.0,), (1.0, 2.0))
    r = HyperRect((1.0, 1.0), (1.0, 2.0))  # zero width is allowed
    assert r.volume == 0.0
    assert r.corners().shape == (4, 2)


def test_polytope_rejects_zero_normal():
    with pytest.raises(ValueError):
        Polytope(np.array([[0.0, 0.0]]), np.array([1.0]))


def test_polytope_box_roundtrip():
    box = HyperRect((0.2, -1.0), (0.4, 3.0))
    back = Polytope.from_box(box).axis_box()
    assert back == box


def test_polytope_vertices_of_triangle():
    tri = Polytope.from_halfspaces([((0.0, -1.0), -0.25), ((-1.0, 0.0), -0.25), ((1.0, 1.0), 1.0)])
    v = tri.vertices(UNIT)
    assert v.shape[0] == 3
    assert np.allclose(sorted(map(tuple, v.round(12))), [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25)])


def test_polytope_emptiness_is_queryable():
    empty = Polytope.from_halfspaces([((1.0, 0.0), 0.1), ((-1.0, 0.0), -0.5)])
    assert empty.is_empty(UNIT)


# --------------------------------------------------------------------------- building and refining

def test_uniform_grid_identity_partition():
    g = build_uniform_grid(UNIT, (1, 1))
    assert len(g) == 1
    assert g.cell(0) == UNIT


def test_uniform_grid_mountain_car_widths():
    g = build_uniform_grid(HyperRect((-1.2, -0.07), (0.6, 0.07)), (100, 100))
    assert len(g) == 10000
    w = g.hi - g.lo
    assert np.allclose(w[:, 0], 0.018)
    assert np.allclose(w[:, 1], 0.0014)


def test_uniform_grid_1d_cells():
    g = build_uniform_grid(HyperRect((0.0,), (2.0,)), (4,))
    assert [(c.lo[0], c.hi[0]) for _, c in g.cells()] == [(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0)]


@pytest.mark.parametrize("counts", [(0, 2), (2, -1)])
def test_uniform_grid_bad_counts(counts):
    with pytest.raises(ValueError):
        build_uniform_grid(UNIT, counts)


def test_uniform_grid_degenerate_bounds():
    with pytest.raises(ValueError):
        build_uniform_grid(HyperRect((0.0, 0.0), (0.0, 1.0)), (1, 1))


def test_refine_splits_relatively_widest_dimension():
    g = grid_from_edges([[0.0, 1.0], [0.0, 0.1, 1.0]])
    cid = int(g.ids[0])  # [0,1] x [0,0.1]
    g2, kids = refine_cells(g, [cid])
    a, b = (g2.cell(k) for k in kids[cid])
    assert (a.lo, a.hi) == ((0.0, 0.0), (0.5, 0.1))
    assert (b.lo, b.hi) == ((0.5, 0.0), (1.0, 0.1))
    assert cid not in g2


def test_refine_1d_three_times():
    g = build_uniform_grid(HyperRect((0.0,), (1.0,)), (1,))
    g = refine_cell(g, 0)
    for cid in list(g.ids):
        g = refine_cell(g, int(cid))
    assert len(g) == 4
    assert np.allclose(np.sort(g.hi[:, 0] - g.lo[:, 0]), 0.25)


def test_refine_unknown_id():
    with pytest.raises(CellNotFoundError):
        refine_cell(build_uniform_grid(UNIT, (2, 2)), 99)


def test_refine_floor():
    g = build_uniform_grid(HyperRect((0.0,), (1.0,)), (1,))
    with pytest.raises(RefinementFloorError):
        for _ in range(200):
            g = refine_cell(g, int(g.ids[np.argmin(g.lo[:, 0])]))


def test_refine_ids_independent_of_order():
    g = build_uniform_grid(UNIT, (3, 3))
    a, _ = refine_cells(g, [4, 1, 7])
    b, _ = refine_cells(g, [7, 4, 1])
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.lo, b.lo)


# --------------------------------------------------------------------------- location

def test_locate_half_open_convention():
    g = build_uniform_grid(HyperRect((0.0,), (2.0,)), (4,))
    assert g.cell(locate(g, [0.5])).lo == (0.5,)
    assert g.cell(locate(g, [2.0])).lo == (1.5,)
    assert g.cell(locate(g, [0.4999])).lo == (0.0,)


def test_locate_out_of_bounds():
    g = build_uniform_grid(UNIT, (2, 2))
    with pytest.raises(OutOfBoundsError):
        locate(g, [1.5, 0.5])
    with pytest.raises(OutOfBoundsError):
        locate_many(g, [[0.5, np.nan]])


@st.composite
def refined_grids(draw):
    nx = draw(st.integers(1, 5))
    ny = draw(st.integers(1, 5))
    g = build_uniform_grid(HyperRect((-1.0, 0.0), (2.0, 0.5)), (nx, ny))
    for _ in range(draw(st.integers(0, 12))):
        k = draw(st.integers(0, len(g) - 1))
        g = refine_cell(g, int(g.ids[k]))
    return g


@given(refined_grids(), st.integers(0, 2**32 - 1))
def test_partition_property(grid, seed):
    rng = np.random.default_rng(seed)
    pts = grid.bounds.lo_array + rng.random((300, 2)) * grid.extent
    # include exact cell corners, where the half-open rule matters
    pts = np.vstack([pts, grid.lo[:20], grid.hi[:20]])
    ids = locate_many(grid, pts)
    inside = (pts[:, None, :] >= grid.lo[None]) & ((pts[:, None, :] < grid.hi[None])
                                                     | ((pts[:, None, :] == grid.hi[None])
                                                        & (grid.hi[None] == grid.bounds.hi_array)))
    owners = np.all(inside, axis=2)
    assert np.all(owners.sum(axis=1) == 1)
    assert np.array_equal(grid.ids[np.argmax(owners, axis=1)], ids)


@given(refined_grids())
def test_refinement_conserves_volume(grid):
    assert np.isclose(grid.volumes().sum(), grid.bounds.volume, rtol=1e-12)


# --------------------------------------------------------------------------- intersection

def test_box_inside_one_cell():
    g = build_uniform_grid(UNIT, (2, 2))
    region = Polytope.from_box(HyperRect((0.1, 0.1), (0.2, 0.2)))
    assert cells_intersecting(g, region) == {locate(g, [0.15, 0.15])}


def test_box_edge_on_shared_boundary_hits_both_cells():
    g = build_uniform_grid(UNIT, (2, 2))
    region = Polytope.from_box(HyperRect((0.1, 0.1), (0.5, 0.2)))
    assert cells_intersecting(g, region) == {locate(g, [0.25, 0.15]), locate(g, [0.75, 0.15])}


def test_triangle_against_rasterisation():
    g = build_uniform_grid(UNIT, (2, 2))
    tri = Polytope.from_halfspaces([((0.0, -1.0), -0.25), ((-1.0, 0.0), -0.25), ((1.0, 1.0), 1.0)])
    got = cells_intersecting(g, tri)
    # raster oracle: dense points in the triangle plus its edges
    s = np.linspace(0, 1, 401)
    u, v = np.meshgrid(s, s)
    keep = u + v <= 1
    a, b, c = np.array([0.25, 0.25]), np.array([0.75, 0.25]), np.array([0.25, 0.75])
    pts = a + u[keep, None] * (b - a) + v[keep, None] * (c - a)
    expected = set(locate_many(g, pts).tolist())
    # the hypotenuse passes exactly through the shared corner (0.5, 0.5): closed boxes all touch it
    expected |= {locate(g, [0.75, 0.75])}
    assert got == expected


def test_intersection_dimension_mismatch():
    g = build_uniform_grid(UNIT, (2, 2))
    with pytest.raises(ValueError):
        rows_intersecting(g, Polytope.from_box(HyperRect((0.0,), (1.0,))))


@st.composite
def polygons(draw):
    """Random convex regions: a few random half-spaces through points near the unit square."""
    k = draw(st.integers(3, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, k)
    normals = np.column_stack([np.cos(ang), np.sin(ang)])
    center = rng.uniform(-0.2, 1.2, 2)
    offsets = normals @ center + rng.uniform(0.0, 0.6, k)
    return Polytope(normals, offsets)


@given(refined_grids(), polygons())
def test_intersection_exact_against_lp(grid, poly):
    got = set(rows_intersecting(grid, poly).tolist())
    expected = {r for r in range(len(grid)) if lp_feasible(poly, grid.lo[r], grid.hi[r])}
    # the geometric answer may differ from the LP only on razor-thin touching cases
    assert expected <= got
    for r in got - expected:
        assert lp_feasible(poly, grid.lo[r] - 1e-9, grid.hi[r] + 1e-9)


@given(refined_grids(), polygons(), st.integers(0, 2**32 - 1))
def test_intersection_conservative_for_feasible_points(grid, poly, seed):
    rng = np.random.default_rng(seed)
    pts = grid.bounds.lo_array + rng.random((4000, 2)) * grid.extent
    pts = pts[poly.contains(pts)]
    hit = set(grid.ids[rows_intersecting(grid, poly)].tolist())
    assert set(locate_many(grid, pts).tolist()) <= hit if pts.size else True


def test_pairs_intersecting_matches_single_queries(rng):
    g = build_uniform_grid(HyperRect((-1.0, -1.0), (1.0, 1.0)), (17, 13))
    lo = rng.uniform(-1.2, 0.8, (40, 2))
    hi = lo + rng.uniform(0.0, 0.5, (40, 2))
    qi, rows = pairs_intersecting(g, lo, hi)
    for k in range(40):
        expected = set(rows_intersecting(g, Polytope.from_box(HyperRect(lo[k], hi[k]))).tolist())
        assert set(rows[qi == k].tolist()) == expected


@given(refined_grids(), polygons())
def test_refinement_keeps_coverage(grid, poly):
    before = grid.ids[rows_intersecting(grid, poly)]
    if before.size == 0:
        return
    finer, kids = refine_cells(grid, before[:3])
    after = set(finer.ids[rows_intersecting(finer, poly)].tolist())
    for cid in before:
        cid = int(cid)
        if cid in kids:
            assert after & set(kids[cid])
        else:
            assert cid in after


# --------------------------------------------------------------------------- serialisation

def test_grid_roundtrip_exact():
    g = refine_cells(build_uniform_grid(HyperRect((-1.2, -0.07), (0.6, 0.07)), (7, 3)), [2, 5])[0]
    buf = io.StringIO()
    dump_grid(g, buf, header=["config_hash=abc"])
    back = load_grid(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.ids, g.ids) and np.array_equal(back.lo, g.lo) and np.array_equal(back.hi, g.hi)
    assert back.next_id == g.next_id


def test_grid_load_rejects_garbage():
    with pytest.raises(GridError):
        load_grid(io.StringIO("dims=2\nbounds=0,0/1,1\n0 0.0 0.0 1.0\n"))

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nnreach import dynamics as dyn
from nnreach.dynamics import Advisory as A
from nnreach.statespace import HyperRect, locate_many

G = dyn.G


def scalar_mc_step(p, v, u, delta):
    """Independent scalar version of the mountain-car update."""
    if p >= 0.6:
        return p, v
    v2 = v + 0.0015 * (u + delta) - 0.0025 * math.cos(3 * p)
    p2 = p + v
    return min(max(p2, -1.2), 0.6), min(max(v2, -0.07), 0.07)


def fine_vcas(h, hdot_fpm, adv, a, substeps=100):
    """Integrate one second with small steps, holding the rate once compliance is reached."""
    v = hdot_fpm / 60.0
    sense, target = A(adv).sense, (A(adv).target or 0.0) / 60.0
    dt = 1.0 / substeps
    for _ in range(substeps):
        if sense and (sense * v >= sense * target):
            v_next = v
        else:
            v_next = v + a * dt
            if sense and sense * v_next > sense * target:
                v_next = target
        h -= 0.5 * (v + v_next) * dt
        v = v_next
    return h, v * 60.0


# --------------------------------------------------------------------------- mountain car

def test_mc_step_examples():
    assert np.allclose(dyn.mc_step([0.0, 0.0], 0), [0.0, -0.0025], atol=1e-15)
    p = -math.pi / 6
    assert np.allclose(dyn.mc_step([p, 0.01], 1), [p + 0.01, 0.0115], atol=1e-15)
    assert np.array_equal(dyn.mc_step([0.6, 0.03], -1), [0.6, 0.03])
    # p clamps at the left wall; gravity there pushes v back up
    assert np.allclose(dyn.mc_step([-1.2, -0.07], -1), [-1.2, -0.07 - 0.0015 - 0.0025 * math.cos(-3.6)], atol=1e-15)
    assert np.allclose(dyn.mc_step([0.0, -0.07], -1), [-0.07, -0.07])


@given(st.floats(-1.2, 0.6), st.floats(-0.07, 0.07), st.sampled_from([-1, 0, 1]), st.floats(-0.5, 0.5))
def test_mc_step_matches_scalar(p, v, u, delta):
    got = dyn.mc_step([p, v], u, delta)
    want = scalar_mc_step(p, v, u, delta)
    assert abs(got[0] - want[0]) <= np.spacing(abs(want[0]) + 1e-300)
    assert abs(got[1] - want[1]) <= np.spacing(abs(want[1]) + 1e-300)


def test_worst_case_disturbance():
    assert dyn.mc_worst_case_disturbance(1, 0.25) == -0.25
    assert dyn.mc_worst_case_disturbance(0, 0.4) == 0.0
    assert dyn.mc_worst_case_disturbance(-1, 0.5) == 0.5


def test_mc_config_validation():
    with pytest.raises(ValueError):
        dyn.McConfig(w=-0.1)


def test_cos_bounds_examples():
    assert dyn.mc_cos_bounds(0.2, 0.2) == pytest.approx((math.cos(0.6), math.cos(0.6)), abs=1e-15)
    lo, hi = dyn.mc_cos_bounds(1.0, 1.1)  # 3p spans pi
    assert lo == -1.0
    with pytest.raises(ValueError):
        dyn.mc_cos_bounds(0.3, 0.2)


def test_cos_bounds_dense_oracle(rng):
    a = rng.uniform(-1.2, 0.6, 1000)
    b = np.minimum(a + rng.uniform(0, 0.8, 1000), 0.6)
    lo, hi = dyn.mc_cos_bounds(a, b)
    for i in range(1000):
        c = np.cos(3 * np.linspace(a[i], b[i], 100_001))
        assert lo[i] <= c.min() + 1e-15 and hi[i] >= c.max() - 1e-15
        assert c.min() - lo[i] < 1e-9 and hi[i] - c.max() < 1e-9


def test_polytope_hand_example():
    b = dyn.mc_polytope_offsets([-0.5, 0.0], [-0.48, 0.002], 1, 0.0)
    lo, hi, ok = dyn.mc_polygon_bbox(b)
    assert ok[0]
    assert dyn.mc_cos_bounds(-0.5, -0.48) == pytest.approx((math.cos(1.5), math.cos(1.44)))
    # the v' constraints are the binding ones here
    assert -b[0, 2] == pytest.approx(0.0015 - 0.0025 * math.cos(1.44), abs=1e-12)
    assert b[0, 3] == pytest.approx(0.002 + 0.0015 - 0.0025 * math.cos(1.5), abs=1e-12)
    assert -b[0, 2] == pytest.approx(0.001174, abs=1e-6) and b[0, 3] == pytest.approx(0.003323, abs=1e-6)


@given(st.floats(-1.2, 0.59), st.floats(-0.07, 0.07), st.sampled_from([-1, 0, 1]))
def test_polytope_tight_for_point_cells(p, v, u):
    poly = dyn.mc_reach_polytope(HyperRect((p, v), (p, v)), u, 0.0)
    succ = dyn.mc_step([p, v], u, clamp=False)
    slack = poly.offsets - poly.normals @ succ
    assert np.all(slack >= 0) and np.all(slack <= 1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0, 1, 2]), st.floats(0.0, 0.5))
def test_polytope_contains_samples(seed, action, w):
    rng = np.random.default_rng(seed)
    lo = rng.uniform([-1.2, -0.07], [0.55, 0.065])
    cell = HyperRect(lo, lo + rng.uniform([1e-4, 1e-5], [0.05, 0.005]))
    u = action - 1
    pts = cell.lo_array + rng.random((500, 2)) * cell.widths
    delta = rng.uniform(-w, w, 500)
    succ = dyn.mc_step(pts, u, delta, clamp=False)
    assert dyn.mc_reach_polytope(cell, u, w).contains(succ).all()


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_successor_rows_cover_clamped_steps(seed, w):
    rng = np.random.default_rng(seed)
    grid = dyn.mc_reach_grid((25, 25))
    model = dyn.McReachModel(w)
    rows = rng.integers(0, len(grid), 8)
    actions = rng.integers(0, 3, 8)
    qi, rr = model.batch_successors(grid, rows, actions)
    for k, (r, a) in enumerate(zip(rows, actions)):
        single = set(model.successor_rows(grid, int(r), int(a)).tolist())
        assert set(rr[qi == k].tolist()) == single
        pts = model.sample_states(grid, np.full(500, r), rng)
        succ = dyn.mc_step(pts, a - 1, rng.uniform(-w, w, 500))
        landed = set(grid.rows(locate_many(grid, dyn.mc_location_points(succ))).tolist())
        assert landed <= single


def test_goal_rows_are_absorbing():
    grid = dyn.mc_reach_grid((10, 10))
    model = dyn.McReachModel(0.1)
    goal = np.flatnonzero(model.goal_rows(grid))
    assert goal.size == 10
    for r in goal:
        assert model.successor_rows(grid, int(r), 0).tolist() == [r]


# --------------------------------------------------------------------------- VerticalCAS

def test_advisory_table():
    names = [a.name for a in A]
    assert names == ["COC", "DNC", "DND", "DES1500", "CL1500", "SDES1500", "SCL1500", "SDES2500", "SCL2500"]
    assert A.DES1500.sense_name == "down" and A.CL1500.sense_name == "up" and A.COC.sense_name == "none"
    assert {a for a in A if a.strengthened} == {A.SDES1500, A.SCL1500, A.SDES2500, A.SCL2500}
    assert A.SCL2500.target == 2500.0 and A.DNC.target == 0.0 and A.COC.target is None


def test_accel_intervals():
    assert dyn.vcas_accel_interval(A.CL1500, -500) == pytest.approx((G / 4, G / 3))
    assert dyn.vcas_accel_interval(A.CL1500, -500) == pytest.approx((8.05, 10.7333), abs=1e-4)
    assert dyn.vcas_accel_interval(A.CL1500, 2000) == (0.0, 0.0)
    assert dyn.vcas_accel_interval(A.COC, 1234) == pytest.approx((-4.025, 4.025))
    assert dyn.vcas_accel_interval(A.SDES1500, 0) == pytest.approx((-G / 3, -G / 3))
    assert dyn.vcas_accel_interval(A.DES1500, 0) == pytest.approx((-G / 3, -G / 4))
    assert dyn.vcas_accel_interval(A.CL1500, -500, accel_scale=1.5) == pytest.approx((G / 4, G / 2))
    with pytest.raises(ValueError):
        dyn.vcas_accel_interval(A.COC, 0, accel_scale=0.5)


def test_vcas_step_examples():
    s = dyn.vcas_step(dyn.VcState(1000.0, 0.0, 10, A.COC), A.DNC, 0.0)
    assert (s.h, s.hdot0, s.tau, s.s_adv) == (1000.0, 0.0, 9, A.DNC)
    assert dyn.vcas_step(dyn.VcState(0.0, 600.0, 5, A.COC), A.COC, 0.0).h == pytest.approx(-10.0)
    pinned = dyn.vcas_step(dyn.VcState(0.0, 1440.0, 5, A.CL1500), A.CL1500, G / 3)
    assert pinned.hdot0 == pytest.approx(1500.0)
    fh, fv = fine_vcas(0.0, 1440.0, A.CL1500, G / 3)
    assert pinned.h == pytest.approx(fh, abs=0.05) and fv == pytest.approx(1500.0)
    with pytest.raises(dyn.TerminalStateError):
        dyn.vcas_step(dyn.VcState(0.0, 0.0, 0, A.COC), A.COC, 0.0)
    with pytest.raises(ValueError):
        dyn.VcState(0.0, 0.0, 41, A.COC)


@given(st.floats(-900, 900), st.floats(-2400, 2400), st.sampled_from(list(A)), st.floats(0, 1))
def test_vcas_step_matches_fine_integrator(h, hdot, adv, frac):
    lo, hi = dyn.vcas_accel_interval(adv, hdot)
    a = lo + frac * (hi - lo)
    s = dyn.vcas_step(dyn.VcState(h, hdot, 7, adv), A.COC, a)
    fh, fv = fine_vcas(h, hdot, adv, a)
    assert s.tau == 6
    assert s.h == pytest.approx(fh, abs=0.05)
    assert s.hdot0 == pytest.approx(fv, abs=1e-6)


def test_reach_rect_point_cell_coc():
    r = dyn.vcas_reach_rect(HyperRect((0.0, 0.0), (0.0, 0.0)), A.COC)
    assert r.widths[0] == pytest.approx(G / 8, abs=1e-8)


def test_reach_rect_compliant_strengthened_is_affine_image():
    cell = HyperRect((100.0, 1600.0), (150.0, 2400.0))  # all at or above the 1500 ft/min target
    r = dyn.vcas_reach_rect(cell, A.SCL1500)
    assert r.lo == pytest.approx((100.0 - 2400 / 60, 1600.0), abs=1e-8)
    assert r.hi == pytest.approx((150.0 - 1600 / 60, 2400.0), abs=1e-8)


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(A)), st.sampled_from([1.0, 1.5]))
def test_reach_rect_contains_samples(seed, adv, scale):
    rng = np.random.default_rng(seed)
    lo = rng.uniform([-1500, -2500], [1400, 2300])
    cell = HyperRect(lo, lo + rng.uniform([1, 10], [100, 400]))
    pts = cell.lo_array + rng.random((500, 2)) * cell.widths
    a = dyn.vcas_sample_accel(np.full(500, int(adv)), pts[:, 1], rng, scale)
    h2, hd2 = dyn.vcas_step_arrays(pts[:, 0], pts[:, 1], np.full(500, int(adv)), a)
    box = dyn.vcas_reach_rect(cell, adv, accel_scale=scale)
    succ = np.column_stack([h2, hd2])
    assert np.all((succ >= box.lo_array) & (succ <= box.hi_array))


def test_vcas_grid_and_nmac():
    grid = dyn.vcas_reach_grid(40, 10)
    assert np.isclose(grid.volumes().sum(), 6000 * 5000)
    flagged = dyn.nmac_rows(grid)
    assert np.all(grid.lo[flagged, 0] < 100) and np.all(grid.hi[flagged, 0] > -100)
    assert flagged.sum() == 4 * 10  # cells of 50 ft: [-100,-50] ... [50,100]

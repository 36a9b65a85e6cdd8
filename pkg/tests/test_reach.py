import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nnreach import dynamics as dyn
from nnreach.dynamics import Advisory as A
from nnreach.mdp import greedy_actions, tabular_action_masks, value_iteration, vcas_h_axis, verticalcas_spec
from nnreach.reach import (AugState, ConfigurationError, NodeLayout, ReachConfig, ReachSet, RegionModel,
                           certified_steps, identity_model, initial_set, is_second_reversal, issue_update,
                           monte_carlo_check, mountain_car_sweep, reach_step, reach_with_delay,
                           reach_with_reversal_limit, refine_until_progress, run_reachability,
                           run_vcas_reachability, self_reachable_cells, sets_contained, transition_graph,
                           VcasReachConfig, VcasReachModel, vcas_monte_carlo, verify_property)
from nnreach.statespace import HyperRect, build_uniform_grid, locate_many, rows_intersecting_box

LINE = HyperRect((0.0,), (4.0,))


def shift_model(amount):
    # shrink by a hair so a shift of exactly one width does not touch the neighbours' shared faces
    return RegionModel(lambda lo, hi, a: [HyperRect(np.minimum(lo + amount + 1e-9, 4.0),
                                                    np.minimum(hi + amount - 1e-9, 4.0))], 1)


def contract(lo, hi, a):
    return [HyperRect(np.clip(lo * 0.5 + 0.1 * a, -1, 1), np.clip(hi * 0.5 + 0.1 * a, -1, 1))]


# --------------------------------------------------------------------------- generic engine

def test_identity_dynamics_is_a_fixed_point():
    grid = build_uniform_grid(HyperRect((0.0, 0.0), (1.0, 1.0)), (3, 3))
    start = initial_set(grid, [0, 4, 8])
    nxt = reach_step(grid, start, np.full(9, 3), identity_model(2))
    assert nxt.same_members(start) and nxt.t == 1
    assert self_reachable_cells(grid, np.ones(9, dtype=np.int64), identity_model()) == set(range(9))


def test_shift_by_one_cell():
    grid = build_uniform_grid(LINE, (4,))
    nxt = reach_step(grid, initial_set(grid, [0]), np.ones(4, dtype=np.int64), shift_model(1.0))
    assert nxt.cell_ids(grid) == {1}
    assert self_reachable_cells(grid, np.ones(4, dtype=np.int64), shift_model(1.0)) == {3}  # clamped at the wall
    assert self_reachable_cells(grid, np.ones(4, dtype=np.int64), shift_model(1.5)) == {3}


def test_missing_action_set_names_cell():
    grid = build_uniform_grid(LINE, (4,))
    with pytest.raises(ConfigurationError, match="cell 2"):
        reach_step(grid, initial_set(grid), {0: 1, 1: 1, 3: 1}, identity_model())
    with pytest.raises(ConfigurationError):
        ReachConfig(horizon=0)


def test_horizon_one_and_fixed_point_rerun():
    grid = build_uniform_grid(LINE, (4,))
    acts = np.ones(4, dtype=np.int64)
    one = run_reachability(grid, ReachConfig(horizon=1), acts, shift_model(1.0))
    assert len(one) == 1 and one[0].cell_ids(grid) == {1, 2, 3}
    run = run_reachability(grid, ReachConfig(horizon=50), acts, shift_model(1.0))
    assert run.fixed_point and run[-1].cell_ids(grid) == {3}
    again = reach_step(grid, run[-1], acts, shift_model(1.0))
    assert again.same_members(run[-1])
    assert run.at(100).same_members(run[-1])


def test_reach_step_order_independent(rng):
    grid = build_uniform_grid(HyperRect((-1.0, -1.0), (1.0, 1.0)), (7, 7))
    model = RegionModel(contract, 3)
    acts = rng.integers(1, 8, 49)
    g1 = transition_graph(grid, acts, model)
    g2 = transition_graph(grid, acts, model, workers=3)
    assert (g1 != g2).nnz == 0


def test_verify_property_examples():
    goal = np.array([False, False, True, True])
    final = ReachSet(5, goal.copy())
    assert verify_property([final], "goal-containment", goal).passed
    unsafe = np.array([False, True, False, False])
    v = verify_property([ReachSet(1, np.array([True, True, False, False]))], "unsafe-exclusion", unsafe)
    assert not v and v.witnesses == (1,) and v.step == 1
    with pytest.raises(ConfigurationError):
        verify_property([], "goal-containment", goal)
    with pytest.raises(ConfigurationError):
        verify_property([final], "unknown", goal)


# --------------------------------------------------------------------------- mountain car

@pytest.fixture(scope="module")
def small_mc(mc_table):
    grid = dyn.mc_reach_grid((30, 30))
    masks = tabular_action_masks(mc_table, grid.lo, grid.hi)
    return grid, masks


def test_one_cell_near_goal(small_mc, mc_table, rng):
    grid, _ = small_mc
    model = dyn.McReachModel(0.0)
    row = int(grid.rows(locate_many(grid, [[0.55, 0.03]]))[0])
    acts = np.zeros(len(grid), dtype=np.int64)
    acts[row] = 1 << 2
    nxt = reach_step(grid, ReachSet(0, np.eye(1, len(grid), row, dtype=bool)[0]), acts, model)
    pts = model.sample_states(grid, np.full(500, row), rng)
    landed = grid.rows(locate_many(grid, dyn.mc_location_points(dyn.mc_step(pts, 1))))
    assert nxt.mask[landed].all()
    assert np.all(grid.lo[nxt.rows(), 0] >= 0.5)


def test_mountain_car_soundness(small_mc, mc_table):
    grid, masks = small_mc
    w = 0.1
    run = run_reachability(grid, ReachConfig(horizon=3000), masks, dyn.McReachModel(w))
    assert run.fixed_point
    ctrl = lambda s: greedy_actions(mc_table, s)
    rep = monte_carlo_check(ctrl, 10_000, "random", w, seed=1, grid=grid, run=run, step_cap=400)
    assert rep.violations == 0


def test_worst_and_random_agree_at_zero_disturbance(mc_table):
    ctrl = lambda s: greedy_actions(mc_table, s)
    a = monte_carlo_check(ctrl, 200, "worst", 0.0, seed=5)
    b = monte_carlo_check(ctrl, 200, "random", 0.0, seed=5)
    assert a.as_dict() == b.as_dict()
    with pytest.raises(ConfigurationError):
        monte_carlo_check(ctrl, 0, "worst", 0.0)


def test_monotone_in_w_and_sweep(small_mc, mc_table):
    grid, masks = small_mc
    ctrl = lambda s: greedy_actions(mc_table, s)
    runs = {}
    res = mountain_car_sweep(grid, masks, [0.1, 0.0, 0.05], ctrl, n_sims=100, horizon=3000, runs=runs)
    assert [r.w for r in res.rows] == [0.0, 0.05, 0.1]
    assert res.monotone
    assert sets_contained(runs[0.0], runs[0.1]) and sets_contained(runs[0.05], runs[0.1])
    for r in res.rows:
        if r.certified:
            assert r.steps == certified_steps(runs[r.w], dyn.McReachModel(r.w).goal_rows(grid))


def test_refinement_already_progressing():
    grid = build_uniform_grid(LINE, (4,))
    rep = refine_until_progress(grid, lambda g: np.ones(len(g), dtype=np.int64), shift_model(1.0), max_rounds=3,
                                criterion="self")
    # the wall cell stays self-reachable however fine it gets, so the round limit stops the loop
    assert rep.counts == [1, 1, 1, 1] and rep.rounds == 3 and len(rep.grid) == 7
    assert rep.remaining == {int(rep.grid.ids[np.argmax(rep.grid.hi[:, 0])])}
    goal_model = RegionModel(shift_model(1.0).regions, 1, goal=lambda g: g.lo[:, 0] >= 3.0)
    rep = refine_until_progress(grid, lambda g: np.ones(len(g), dtype=np.int64), goal_model, max_rounds=3)
    assert rep.counts == [0] and len(rep.grid) == 4 and rep.rounds == 0
    with pytest.raises(ConfigurationError):
        refine_until_progress(grid, lambda g: np.ones(len(g)), goal_model, criterion="bogus")


# --------------------------------------------------------------------------- VerticalCAS bookkeeping

def test_double_reversal_detected():
    aug = AugState()
    aug = issue_update(aug, A.COC, A.CL1500, 3)
    assert aug.reversals == 0 and aug.last_sense == 1
    aug = issue_update(aug, A.CL1500, A.DES1500, 3)
    assert aug.reversals == 1 and aug.last_sense == -1
    assert not is_second_reversal(aug, A.COC) and not is_second_reversal(aug, A.SDES2500)
    assert is_second_reversal(aug, A.SCL1500)
    aug = issue_update(aug, A.DES1500, A.COC, 3)
    assert aug.last_sense == -1 and aug.recent == (A.DES1500, A.CL1500, A.COC)
    with pytest.raises(ValueError):
        AugState(reversals=3)


@given(st.integers(1, 500), st.integers(0, 4), st.booleans(), st.integers(0, 2**32 - 1))
def test_node_layout_roundtrip(n_rows, delay, track, seed):
    rng = np.random.default_rng(seed)
    layout = NodeLayout(n_rows, delay, track)
    k = 50
    row, adv = rng.integers(0, n_rows, k), rng.integers(0, 9, k)
    hist = rng.integers(0, 9, (k, delay))
    count = rng.integers(0, 3, k) if track else np.zeros(k, dtype=np.int64)
    last = rng.integers(-1, 2, k) if track else np.zeros(k, dtype=np.int64)
    d = layout.decode(layout.encode(row, adv, hist, count, last))
    assert np.array_equal(d["row"], row) and np.array_equal(d["adv"], adv) and np.array_equal(d["hist"], hist)
    assert np.array_equal(d["count"], count) and np.array_equal(d["last"], last)


# --------------------------------------------------------------------------- VerticalCAS engine (small model)

TAU0 = 8


@pytest.fixture(scope="module")
def vcas_small():
    spec = verticalcas_spec(h_axis=vcas_h_axis(100.0, 500.0), hdot_axis=np.linspace(-2500, 2500, 11), tau_max=TAU0,
                            combine="worst", nmac_buffer=100.0)
    table = value_iteration(spec)
    grid = dyn.vcas_reach_grid(16, 8)
    return VcasReachModel(grid, table)


def oracle_plain_run(model, tau0):
    """Independent (cell, advisory) reach sets built cell by cell with box intersection."""
    grid, table = model.grid, model.table
    cur = {(r, int(A.COC)) for r in range(len(grid))}
    sets = []
    for tau in range(tau0, 0, -1):
        nxt = set()
        for r, adv in cur:
            acts = int(tabular_action_masks(table, grid.lo[r:r + 1], grid.hi[r:r + 1], adv, tau)[0])
            box = dyn.vcas_reach_rect(grid.cell(int(grid.ids[r])), adv)
            dst = rows_intersecting_box(grid, box.lo_array, box.hi_array)
            nxt |= {(int(d), a) for d in dst for a in range(9) if (acts >> a) & 1}
        sets.append(nxt)
        cur = nxt
    return sets


def pairs_of(nodeset):
    d = nodeset.layout.decode(nodeset.codes)
    return {(int(r), int(a)) for r, a in zip(d["row"], d["adv"])}


def test_plain_run_matches_oracle(vcas_small):
    run = run_vcas_reachability(vcas_small, VcasReachConfig(tau0=TAU0))
    assert len(run) == TAU0 and run[-1].tau == 0 and [s.t for s in run] == list(range(1, TAU0 + 1))
    for got, want in zip(run, oracle_plain_run(vcas_small, TAU0)):
        assert pairs_of(got) == want


def test_delay_superset_and_bookkeeping(vcas_small):
    plain = run_vcas_reachability(vcas_small, VcasReachConfig(tau0=TAU0))
    delayed = reach_with_delay(vcas_small, VcasReachConfig(tau0=TAU0, delay=2))
    for a, b in zip(plain, delayed):
        assert not (a.mask & ~b.mask).any()
        assert pairs_of(a) <= pairs_of(b)
    # histories hold the previous advisories, newest first
    prev = {(m[2], m[3].recent) for m in delayed[0].members(vcas_small.grid)}
    assert all(rec == (A.COC, A.COC) for _, rec in prev)
    second = delayed[1].members(vcas_small.grid)
    firsts = {m[2] for m in delayed[0].members(vcas_small.grid)}
    assert all(m[3].recent[0] in firsts and m[3].recent[1] == A.COC for m in second)
    with pytest.raises(ConfigurationError):
        reach_with_delay(vcas_small, VcasReachConfig(tau0=TAU0))


def test_reversal_bookkeeping_matches_issue_update(vcas_small):
    cfg = VcasReachConfig(tau0=TAU0, reversal_limit=True)
    run = reach_with_reversal_limit(vcas_small, cfg)
    prev_nodes = run[2].members(vcas_small.grid)
    following = {(m[2], m[3].reversals, m[3].last_sense) for m in run[3].members(vcas_small.grid)}
    # every successor's counter is what issue_update gives for some predecessor
    possible = {(A(a), issue_update(m[3], m[2], a, 0).reversals, issue_update(m[3], m[2], a, 0).last_sense)
                for m in prev_nodes for a in range(9)}
    assert following <= possible
    # no node ever records more than one reversal under the limit
    assert all(m[3].reversals <= 1 for s in run for m in s.members(vcas_small.grid))
    with pytest.raises(ConfigurationError):
        reach_with_reversal_limit(vcas_small, VcasReachConfig(tau0=TAU0))


@pytest.mark.parametrize("cfg", [VcasReachConfig(tau0=TAU0), VcasReachConfig(tau0=TAU0, delay=2),
                                 VcasReachConfig(tau0=TAU0, reversal_limit=True),
                                 VcasReachConfig(tau0=TAU0, delay=1, reversal_limit=True)])
def test_vcas_soundness(vcas_small, cfg):
    run = run_vcas_reachability(vcas_small, cfg)
    rep = vcas_monte_carlo(vcas_small, 10_000, seed=2, cfg=cfg, run=run)
    assert rep.violations == 0, rep.first_violation


def test_vcas_config_checks(vcas_small):
    with pytest.raises(ConfigurationError):
        VcasReachConfig(delay=5)
    with pytest.raises(ConfigurationError):
        VcasReachConfig(tau0=0)
    with pytest.raises(ConfigurationError):
        run_vcas_reachability(vcas_small, VcasReachConfig(tau0=TAU0, accel_scale=1.5))

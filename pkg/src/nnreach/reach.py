"""Reachable-set iteration over a cell grid and the checks built on it.

A ``ReachSet`` is the set of grid rows (cells) the closed loop may occupy
at step ``t``.  One step takes every member cell, every action the
controller may produce there, and collects the cells meeting the
successor region.  Because the controller's action sets and the successor
regions over-approximate the truth, a cell missing from ``R_t`` is
unreachable at ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import dynamics as dyn
from .mdp import interpolate_many, tabular_action_masks
from .network import argmax_actions
from .parallel import chunked, pmap
from .statespace import (Grid, Polytope, RefinementFloorError, locate_many, pairs_intersecting,
                         refine_cells, rows_intersecting, rows_intersecting_box)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReachSet:
    t: int
    mask: np.ndarray  # boolean over grid rows

    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def cell_ids(self, grid: Grid) -> set[int]:
        return {int(i) for i in grid.ids[self.mask]}

    def __len__(self) -> int:
        return int(self.mask.sum())

    def same_members(self, other: "ReachSet") -> bool:
        return bool(np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class ReachConfig:
    horizon: int = 1000
    stop_at_fixed_point: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("the horizon T must be >= 1")


@dataclass(frozen=True, eq=False)
class ReachRun:
    sets: list
    fixed_point: bool

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, k):
        return self.sets[k]

    def at(self, t: int) -> ReachSet:
        """Set at step ``t`` (sets past a fixed point repeat the last one)."""
        if t < 1:
            raise IndexError("reach sets start at t = 1")
        if t <= len(self.sets):
            return self.sets[t - 1]
        if self.fixed_point:
            return self.sets[-1]
        raise IndexError(f"no reach set for t = {t}")


# --------------------------------------------------------------------------- generic models

class RegionModel:
    """Successor oracle from a callable ``(lo, hi, action) -> list of regions``.

    Regions may be ``Polytope`` or ``HyperRect`` objects, or the string
    ``"self"`` meaning the cell itself (by identity, not by intersection).
    """

    def __init__(self, regions: Callable, n_actions: int, goal: Callable | None = None):
        self.regions = regions
        self.n_actions = n_actions
        self._goal = goal

    def goal_rows(self, grid: Grid) -> np.ndarray:
        if self._goal is None:
            return np.zeros(len(grid), dtype=bool)
        return np.asarray(self._goal(grid), dtype=bool)

    def successor_rows(self, grid: Grid, row: int, action: int) -> np.ndarray:
        hits = []
        for reg in self.regions(grid.lo[row], grid.hi[row], action):
            if isinstance(reg, str) and reg == "self":
                hits.append(np.array([row], dtype=np.int64))
            elif isinstance(reg, Polytope):
                hits.append(rows_intersecting(grid, reg))
            else:
                hits.append(rows_intersecting_box(grid, reg.lo_array, reg.hi_array))
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(hits))


def identity_model(n_actions: int = 1) -> RegionModel:
    return RegionModel(lambda lo, hi, a: ["self"], n_actions)


# --------------------------------------------------------------------------- action-set plumbing

def masks_for_rows(grid: Grid, action_sets, rows=None) -> np.ndarray:
    """Action masks aligned with grid rows; accepts a mapping or a row-aligned array."""
    rows = np.arange(len(grid)) if rows is None else np.asarray(rows)
    if isinstance(action_sets, Mapping):
        out = np.empty(rows.size, dtype=np.int64)
        for k, r in enumerate(rows):
            cid = int(grid.ids[r])
            try:
                out[k] = action_sets[cid]
            except KeyError:
                raise ConfigurationError(f"no action set for cell {cid}") from None
        return out
    arr = np.asarray(action_sets, dtype=np.int64)
    if arr.shape != (len(grid),):
        raise ConfigurationError(f"action-set array has shape {arr.shape}, grid has {len(grid)} cells")
    return arr[rows]


def _mask_actions(mask: int, n_actions: int):
    return [a for a in range(n_actions) if (int(mask) >> a) & 1]


def _successor_chunk(args):
    grid, model, rows, masks = args
    if hasattr(model, "batch_successors"):
        bits = (masks[:, None] >> np.arange(model.n_actions)) & 1
        pr, pa = np.nonzero(bits)
        qi, dst = model.batch_successors(grid, rows[pr], pa)
        return rows[pr][qi], dst
    src, dst = [], []
    for r, m in zip(rows, masks):
        for a in _mask_actions(m, model.n_actions):
            s = model.successor_rows(grid, int(r), a)
            src.append(np.full(s.size, r, dtype=np.int64))
            dst.append(s)
    if not src:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(src), np.concatenate(dst)


def transition_graph(grid: Grid, action_sets, model, rows=None, workers: int = 1) -> sp.csr_matrix:
    """Boolean ``N x N`` matrix with ``G[i, j]`` set when cell row ``j`` is a possible successor of ``i``."""
    rows = np.arange(len(grid)) if rows is None else np.asarray(rows, dtype=np.int64)
    masks = masks_for_rows(grid, action_sets, rows)
    parts = chunked(rows.size, max(1, workers * 4)) if rows.size else []
    results = pmap(_successor_chunk, [(grid, model, rows[s], masks[s]) for s in parts], workers)
    src = np.concatenate([r[0] for r in results]) if results else np.empty(0, dtype=np.int64)
    dst = np.concatenate([r[1] for r in results]) if results else np.empty(0, dtype=np.int64)
    n = len(grid)
    g = sp.csr_matrix((np.ones(src.size, dtype=np.int32), (src, dst)), shape=(n, n))
    g.sum_duplicates()
    g.data[:] = 1
    return g


def _advance(graph: sp.csr_matrix, mask: np.ndarray) -> np.ndarray:
    return (graph.T @ mask.astype(np.int32)) > 0


def reach_step(grid: Grid, current: ReachSet, action_sets, model, workers: int = 1) -> ReachSet:
    rows = current.rows()
    graph = transition_graph(grid, action_sets, model, rows, workers)
    return ReachSet(current.t + 1, _advance(graph, current.mask))


def initial_set(grid: Grid, cells=None) -> ReachSet:
    mask = np.zeros(len(grid), dtype=bool)
    if cells is None:
        mask[:] = True
    else:
        mask[grid.rows(cells)] = True
    return ReachSet(0, mask)


def run_reachability(grid: Grid, cfg: ReachConfig, action_sets, model, start: ReachSet | None = None,
                     graph: sp.csr_matrix | None = None) -> ReachRun:
    """Iterate the one-step map from ``start`` (default: every cell); returns R_1, R_2, ..."""
    current = initial_set(grid) if start is None else start
    if graph is None:
        graph = transition_graph(grid, action_sets, model, workers=cfg.workers)
    sets = []
    fixed = False
    for _ in range(cfg.horizon):
        nxt = ReachSet(current.t + 1, _advance(graph, current.mask))
        if cfg.stop_at_fixed_point and nxt.same_members(current):
            fixed = True
            if not sets:
                sets.append(nxt)
            break
        sets.append(nxt)
        current = nxt
    return ReachRun(sets, fixed)


def self_reachable_rows(graph: sp.csr_matrix) -> np.ndarray:
    return np.asarray(graph.diagonal() > 0)


def self_reachable_cells(grid: Grid, action_sets, model, workers: int = 1) -> set[int]:
    graph = transition_graph(grid, action_sets, model, workers=workers)
    return {int(i) for i in grid.ids[self_reachable_rows(graph)]}


def cyclic_rows(graph: sp.csr_matrix, among: np.ndarray) -> np.ndarray:
    """Rows of ``among`` lying on a cycle of the subgraph induced by ``among``."""
    idx = np.flatnonzero(among)
    sub = graph[idx][:, idx]
    ncomp, labels = connected_components(sub, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=ncomp)
    on_cycle = (sizes[labels] > 1) | (sub.diagonal() > 0)
    out = np.zeros(graph.shape[0], dtype=bool)
    out[idx[on_cycle]] = True
    return out


@dataclass
class RefineReport:
    grid: Grid
    counts: list = field(default_factory=list)  # flagged non-goal cells before each round
    remaining: set = field(default_factory=set)
    floor_reached: bool = False
    rounds: int = 0


def refine_until_progress(grid: Grid, policy: Callable[[Grid], np.ndarray], model, max_rounds: int = 10,
                          criterion: str = "self", workers: int = 1, log=None) -> RefineReport:
    """Split non-goal cells that block progress until none remain.

    ``policy(grid)`` returns row-aligned action masks for the current grid.
    With ``criterion="self"`` the flagged cells are those in their own
    successor set; ``"cycles"`` flags every non-goal cell on a cycle of the
    abstract transition graph, which is what a goal-reaching proof needs.
    """
    if max_rounds < 1:
        raise ConfigurationError("max_rounds must be >= 1")
    if criterion not in ("self", "cycles"):
        raise ConfigurationError(f"unknown refinement criterion {criterion!r}")
    report = RefineReport(grid)
    for rnd in range(max_rounds + 1):
        masks = policy(grid)
        graph = transition_graph(grid, masks, model, workers=workers)
        live = ~model.goal_rows(grid)
        if criterion == "self":
            flagged = self_reachable_rows(graph) & live
        else:
            flagged = cyclic_rows(graph, live)
        report.counts.append(int(flagged.sum()))
        report.grid = grid
        report.remaining = {int(i) for i in grid.ids[flagged]}
        if log is not None:
            log(f"round {rnd}: {len(grid)} cells, {int(flagged.sum())} flagged")
        if not flagged.any() or rnd == max_rounds:
            break
        try:
            grid, _ = refine_cells(grid, grid.ids[flagged])
        except RefinementFloorError:
            report.floor_reached = True
            break
        report.rounds = rnd + 1
    return report


# --------------------------------------------------------------------------- verdicts

@dataclass(frozen=True)
class Verdict:
    passed: bool
    witnesses: tuple = ()
    step: int | None = None

    def __bool__(self):
        return self.passed


def verify_property(sets: Sequence[ReachSet], predicate: str, region: np.ndarray, final_only: bool = True) -> Verdict:
    """``goal-containment``: the final set lies inside ``region``;
    ``unsafe-exclusion``: the checked sets avoid ``region``.

    ``region`` is a boolean row mask.  Witnesses are offending rows.
    """
    if not sets:
        raise ConfigurationError("empty reach sequence")
    region = np.asarray(region, dtype=bool)
    if predicate == "goal-containment":
        bad = sets[-1].mask & ~region
        return Verdict(not bad.any(), tuple(int(r) for r in np.flatnonzero(bad)), sets[-1].t)
    if predicate == "unsafe-exclusion":
        checked = [sets[-1]] if final_only else list(sets)
        for s in checked:
            bad = s.mask & region
            if bad.any():
                return Verdict(False, tuple(int(r) for r in np.flatnonzero(bad)), s.t)
        return Verdict(True, (), checked[-1].t)
    raise ConfigurationError(f"unknown predicate {predicate!r}")


def certified_steps(run: ReachRun, goal: np.ndarray) -> int | None:
    """First t with R_t inside the goal set, or None when never certified."""
    for s in run.sets:
        if not (s.mask & ~goal).any():
            return s.t
    return None


# --------------------------------------------------------------------------- mountain-car Monte Carlo

@dataclass
class McReport:
    n: int
    reached: int
    max_steps: int | None
    non_terminating: int
    violations: int
    first_violation: tuple | None = None

    def as_dict(self) -> dict:
        return {"n": self.n, "reached": self.reached, "max_steps": self.max_steps,
                "non_terminating": self.non_terminating, "violations": self.violations}


def monte_carlo_check(controller: Callable[[np.ndarray], np.ndarray], n_sims: int, mode: str, w: float,
                      seed: int = 0, grid: Grid | None = None, run: ReachRun | None = None,
                      step_cap: int = 2000, starts: np.ndarray | None = None) -> McReport:
    """Simulate the exact mountain car under ``controller`` (states -> action indices).

    ``mode="worst"`` applies the opposing disturbance every step,
    ``mode="random"`` draws it uniformly from [-w, w].  With ``grid`` and
    ``run`` supplied, every visited state's cell must belong to the reach
    set of its step; misses are counted as violations.
    """
    if n_sims < 1:
        raise ConfigurationError("n_sims must be >= 1")
    if mode not in ("worst", "random"):
        raise ConfigurationError(f"unknown Monte Carlo mode {mode!r}")
    rng = np.random.default_rng(seed)
    if starts is None:
        starts = np.column_stack([rng.uniform(dyn.P_MIN, dyn.P_MAX, n_sims), rng.uniform(dyn.V_MIN, dyn.V_MAX, n_sims)])
        starts[:, 0] = np.minimum(starts[:, 0], np.nextafter(dyn.GOAL, -1.0))
    state = np.array(starts, dtype=float)
    n = state.shape[0]
    steps = np.full(n, -1)
    steps[state[:, 0] >= dyn.GOAL] = 0
    violations = 0
    first = None
    check = grid is not None and run is not None
    row_of = grid.row_map if check else None
    for t in range(1, step_cap + 1):
        active = steps < 0
        if not active.any():
            break
        acts = np.asarray(controller(state[active]), dtype=np.int64)
        u = dyn.mc_action_value(acts)
        noise = rng.uniform(-w, w, acts.size)  # drawn in both modes to keep the stream aligned
        delta = dyn.mc_worst_case_disturbance(u, w) if mode == "worst" else noise
        state[active] = dyn.mc_step(state[active], u, delta)
        reached = active & (state[:, 0] >= dyn.GOAL)
        steps[reached] = t
        if check:
            rset = run.at(t)
            ids = locate_many(grid, dyn.mc_location_points(state))
            rows = np.fromiter((row_of[int(i)] for i in ids), dtype=np.int64, count=ids.size)
            miss = ~rset.mask[rows]
            if miss.any():
                violations += int(miss.sum())
                if first is None:
                    k = int(np.argmax(miss))
                    first = (t, tuple(state[k]), int(ids[k]))
    done = steps >= 0
    return McReport(n, int(done.sum()), int(steps[done].max()) if done.any() else None, int((~done).sum()),
                    violations, first)


# --------------------------------------------------------------------------- disturbance sweep

@dataclass(frozen=True)
class SweepRow:
    w: float
    certified: bool
    steps: int | None  # certified steps to goal
    mc_max_steps: int | None  # worst-case Monte Carlo
    mc_non_terminating: int


@dataclass
class SweepResult:
    rows: list
    monotone: bool  # reach sets grow with w at every step

    @property
    def certified_w(self) -> float | None:
        """Largest swept w such that it and every smaller swept w are certified."""
        best = None
        for r in self.rows:
            if not r.certified:
                break
            best = r.w
        return best


def sets_contained(small: ReachRun, big: ReachRun) -> bool:
    """``small.at(t) <= big.at(t)`` for every step both runs define."""
    n = max(len(small), len(big))
    for t in range(1, n + 1):
        try:
            a, b = small.at(t), big.at(t)
        except IndexError:
            break
        if (a.mask & ~b.mask).any():
            return False
    return True


def mountain_car_sweep(grid: Grid, action_sets, ws, controller: Callable, n_sims: int = 2000, seed: int = 0,
                       horizon: int = 5000, workers: int = 1, runs: dict | None = None) -> SweepResult:
    """Certified steps and worst-case Monte Carlo steps for each disturbance bound.

    ``runs``, when given, receives the reach run of every w.
    """
    rows, prev, mono = [], None, True
    for w in sorted(float(x) for x in ws):
        model = dyn.McReachModel(w)
        run = run_reachability(grid, ReachConfig(horizon, True, workers), action_sets, model)
        steps = certified_steps(run, model.goal_rows(grid))
        mc = monte_carlo_check(controller, n_sims, "worst", w, seed=seed)
        rows.append(SweepRow(w, steps is not None, steps, mc.max_steps, mc.non_terminating))
        if prev is not None and not sets_contained(prev, run):
            mono = False
        if runs is not None:
            runs[w] = run
        prev = run
    return SweepResult(rows, mono)


# --------------------------------------------------------------------------- VerticalCAS

@dataclass(frozen=True)
class AugState:
    """Discrete bookkeeping carried next to a VerticalCAS cell.

    ``recent`` holds the advisories issued before the current one, newest
    first.  ``reversals`` saturates at 2; ``last_sense`` is the sense of the
    most recent advisory that had one.
    """

    recent: tuple = ()
    reversals: int = 0
    last_sense: int = 0

    def __post_init__(self):
        for a in self.recent:
            dyn.Advisory(a)
        if not 0 <= self.reversals <= 2:
            raise ValueError("the reversal counter saturates at 2")
        if self.last_sense not in (-1, 0, 1):
            raise ValueError("last_sense must be -1, 0 or 1")


def issue_update(aug: AugState, current, issued, delay: int) -> AugState:
    """Bookkeeping after ``issued`` replaces ``current``."""
    sense = dyn.Advisory(issued).sense
    rev = aug.last_sense != 0 and sense != 0 and sense != aug.last_sense
    recent = ((int(current),) + tuple(aug.recent))[:delay]
    return AugState(recent, min(2, aug.reversals + int(rev)), sense if sense != 0 else aug.last_sense)


def is_second_reversal(aug: AugState, issued) -> bool:
    sense = dyn.Advisory(issued).sense
    return aug.reversals >= 1 and aug.last_sense != 0 and sense != 0 and sense != aug.last_sense


@dataclass(frozen=True)
class NodeLayout:
    """Packs (row, advisory, history, reversal count, last sense) into one int64."""

    n_rows: int
    delay: int = 0
    track_reversals: bool = False

    def encode(self, row, adv, hist, count, last) -> np.ndarray:
        code = np.asarray(row, dtype=np.int64) * dyn.N_ADV + np.asarray(adv, dtype=np.int64)
        hist = np.asarray(hist, dtype=np.int64).reshape(code.shape + (self.delay,))
        for k in range(self.delay):
            code = code * dyn.N_ADV + hist[..., k]
        if self.track_reversals:
            code = code * 3 + np.asarray(count, dtype=np.int64)
            code = code * 3 + (np.asarray(last, dtype=np.int64) + 1)
        return code

    def decode(self, codes) -> dict:
        code = np.array(codes, dtype=np.int64)
        last = np.zeros(code.shape, dtype=np.int64)
        count = np.zeros(code.shape, dtype=np.int64)
        if self.track_reversals:
            last = code % 3 - 1
            code = code // 3
            count = code % 3
            code = code // 3
        hist = np.empty(code.shape + (self.delay,), dtype=np.int64)
        for k in reversed(range(self.delay)):
            hist[..., k] = code % dyn.N_ADV
            code = code // dyn.N_ADV
        return {"row": code // dyn.N_ADV, "adv": code % dyn.N_ADV, "hist": hist, "count": count, "last": last}


@dataclass(frozen=True, eq=False)
class NodeSet:
    """VerticalCAS reach set at step ``t`` (``tau`` counts down as ``t`` grows)."""

    t: int
    tau: int
    codes: np.ndarray  # sorted unique node codes
    layout: NodeLayout

    @property
    def mask(self) -> np.ndarray:
        """Projection onto grid rows."""
        out = np.zeros(self.layout.n_rows, dtype=bool)
        out[self.layout.decode(self.codes)["row"]] = True
        return out

    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def advisory_mask(self) -> np.ndarray:
        """Boolean ``(N_ADV, n_rows)`` occupancy of (advisory, cell) pairs."""
        d = self.layout.decode(self.codes)
        out = np.zeros((dyn.N_ADV, self.layout.n_rows), dtype=bool)
        out[d["adv"], d["row"]] = True
        return out

    def __len__(self) -> int:
        return int(self.codes.size)

    def members(self, grid: Grid) -> list[tuple]:
        """``(cell_id, tau, advisory, AugState)`` tuples in code order."""
        d = self.layout.decode(self.codes)
        return [(int(grid.ids[r]), self.tau, dyn.Advisory(int(a)), AugState(tuple(int(x) for x in h), int(c), int(s)))
                for r, a, h, c, s in zip(d["row"], d["adv"], d["hist"], d["count"], d["last"])]


@dataclass(frozen=True)
class VcasReachConfig:
    tau0: int = dyn.TAU_MAX
    delay: int = 0
    reversal_limit: bool = False
    accel_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.tau0 <= dyn.TAU_MAX:
            raise ConfigurationError(f"tau0 must lie in 1..{dyn.TAU_MAX}")
        if not 0 <= self.delay <= 4:
            raise ConfigurationError("the pilot delay must lie in 0..4 seconds")
        if self.accel_scale < 1.0:
            raise ConfigurationError("accel_scale must be >= 1")


def _vcas_geometry_chunk(args):
    grid, lo, hi, adv, accel_scale = args
    blo, bhi = dyn.vcas_rect_bounds(lo, hi, adv, accel_scale)
    return pairs_intersecting(grid, blo, bhi)


_ALL = (1 << dyn.N_ADV) - 1
_UP = sum(1 << a for a in range(dyn.N_ADV) if dyn.SENSES[a] > 0)
_DOWN = sum(1 << a for a in range(dyn.N_ADV) if dyn.SENSES[a] < 0)
# greedy choice over: every advisory, everything but descents, everything but climbs
_PERMITTED = (_ALL, _ALL & ~_DOWN, _ALL & ~_UP)


def _variant(count, last) -> np.ndarray:
    """Which permitted subset applies: 0 free, 1 after climbing, 2 after descending."""
    used = (np.asarray(count) >= 1) & (np.asarray(last) != 0)
    return np.where(used, np.where(np.asarray(last) > 0, 1, 2), 0)


def _vcas_mask_job(args):
    table, lo, hi, tau = args
    per_adv = [tabular_action_masks(table, lo, hi, discrete_index=s, stage=tau, subsets=_PERMITTED)
               for s in range(dyn.N_ADV)]
    return np.stack(per_adv, axis=1)  # (variant, advisory, row)


class VcasReachModel:
    """Successor geometry and tabular action sets for the VerticalCAS grid.

    ``table`` is a staged Q-table over (h, hdot0) with the current advisory
    as its discrete index; stage ``tau`` scores the advisory issued at ``tau``.
    """

    def __init__(self, grid: Grid, table, accel_scale: float = 1.0, workers: int = 1):
        if not table.staged:
            raise ConfigurationError("VerticalCAS needs a staged (per-tau) Q-table")
        self.grid = grid
        self.table = table
        self.accel_scale = float(accel_scale)
        self.workers = workers
        n = len(grid)
        self.successors = []
        for p in range(dyn.N_ADV):
            parts = chunked(n, max(1, workers))
            res = pmap(_vcas_geometry_chunk,
                       [(grid, grid.lo[s], grid.hi[s], p, self.accel_scale) for s in parts], workers)
            src = np.concatenate([np.arange(n)[s][r[0]] for s, r in zip(parts, res)])
            dst = np.concatenate([r[1] for r in res])
            g = sp.csr_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
            g.sum_duplicates()
            g.data[:] = 1
            self.successors.append(g)
        self._masks: dict[int, np.ndarray] = {}

    def prepare_masks(self, taus) -> None:
        todo = [int(t) for t in taus if int(t) not in self._masks]
        res = pmap(_vcas_mask_job, [(self.table, self.grid.lo, self.grid.hi, t) for t in todo], self.workers)
        self._masks.update(zip(todo, res))

    def masks(self, tau: int) -> np.ndarray:
        """``(3, N_ADV, n_rows)`` action masks at ``tau``.

        Indexed by the permitted-subset variant (see ``_variant``), then the
        current advisory, then the grid row.
        """
        if tau not in self._masks:
            self.prepare_masks([tau])
        return self._masks[tau]

    def step(self, nodes: np.ndarray, tau: int, layout: NodeLayout, reversal_limit: bool) -> np.ndarray:
        """Successor node codes at ``tau - 1`` of the node codes at ``tau``."""
        if nodes.size == 0:
            return nodes
        d = layout.decode(nodes)
        row, cur, hist, count, last = d["row"], d["adv"], d["hist"], d["count"], d["last"]
        n = nodes.size
        options = np.left_shift(1, cur)
        for k in range(layout.delay):
            options = options | np.left_shift(1, hist[:, k])
        # geometric successors under every advisory the pilot may be flying
        pn, pd = [], []
        for p in range(dyn.N_ADV):
            sel = np.flatnonzero((options >> p) & 1)
            if sel.size == 0:
                continue
            sub = self.successors[p][row[sel]].tocoo()
            pn.append(sel[sub.row])
            pd.append(sub.col.astype(np.int64))
        pair = np.unique(np.concatenate(pn) * layout.n_rows + np.concatenate(pd))
        p_node, p_dst = pair // layout.n_rows, pair % layout.n_rows
        new_hist = np.column_stack([cur, hist[:, :-1]]) if layout.delay else hist
        variant = _variant(count, last) if reversal_limit else np.zeros(n, dtype=np.int64)
        acts = self.masks(tau)[variant, cur, row]
        allowed = np.zeros((n, dyn.N_ADV), dtype=bool)
        rev = np.zeros((n, dyn.N_ADV), dtype=bool)
        for a in range(dyn.N_ADV):
            sa = int(dyn.SENSES[a])
            allowed[:, a] = ((acts >> a) & 1).astype(bool)
            rev[:, a] = (last != 0) & (sa != 0) & (sa != last)
        stuck = ~allowed.any(axis=1)
        allowed[stuck, cur[stuck]] = True  # nothing permitted: keep the previous advisory
        out = []
        for a in range(dyn.N_ADV):
            keep = allowed[p_node, a]
            if not keep.any():
                continue
            nd = p_node[keep]
            sa = int(dyn.SENSES[a])
            if layout.track_reversals:
                c2 = np.minimum(2, count[nd] + rev[nd, a])
                l2 = last[nd] if sa == 0 else np.full(nd.size, sa)
            else:
                c2 = l2 = 0
            out.append(layout.encode(p_dst[keep], np.full(nd.size, a), new_hist[nd], c2, l2))
        return np.unique(np.concatenate(out))


def vcas_initial_nodes(layout: NodeLayout, rows=None) -> np.ndarray:
    """Every given cell (default: all) with COC current and a COC history."""
    rows = np.arange(layout.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    coc = int(dyn.Advisory.COC)
    return np.unique(layout.encode(rows, np.full(rows.size, coc), np.full((rows.size, layout.delay), coc), 0, 0))


def run_vcas_reachability(model: VcasReachModel, cfg: VcasReachConfig = VcasReachConfig(),
                          start_rows=None) -> list[NodeSet]:
    """R_1 .. R_tau0; ``R_t`` lives at ``tau = tau0 - t`` and the last set is at ``tau = 0``."""
    if cfg.accel_scale != model.accel_scale:
        raise ConfigurationError("the model geometry was built for a different accel_scale")
    layout = NodeLayout(len(model.grid), cfg.delay, cfg.reversal_limit)
    model.prepare_masks(range(1, cfg.tau0 + 1))
    nodes = vcas_initial_nodes(layout, start_rows)
    out = []
    for t in range(1, cfg.tau0 + 1):
        nodes = model.step(nodes, cfg.tau0 - t + 1, layout, cfg.reversal_limit)
        out.append(NodeSet(t, cfg.tau0 - t, nodes, layout))
    return out


def reach_with_delay(model: VcasReachModel, cfg: VcasReachConfig, start_rows=None) -> list[NodeSet]:
    if cfg.delay < 1:
        raise ConfigurationError("reach_with_delay needs a delay of at least 1 s")
    return run_vcas_reachability(model, cfg, start_rows)


def reach_with_reversal_limit(model: VcasReachModel, cfg: VcasReachConfig, start_rows=None) -> list[NodeSet]:
    if not cfg.reversal_limit:
        raise ConfigurationError("reach_with_reversal_limit needs reversal_limit enabled")
    return run_vcas_reachability(model, cfg, start_rows)


@dataclass
class VcasMcReport:
    n: int
    nmac: int
    violations: int
    first_violation: tuple | None = None

    def as_dict(self) -> dict:
        return {"n": self.n, "nmac": self.nmac, "violations": self.violations}


def vcas_monte_carlo(model: VcasReachModel, n_sims: int, seed: int = 0, cfg: VcasReachConfig = VcasReachConfig(),
                     run: Sequence[NodeSet] | None = None) -> VcasMcReport:
    """Simulate the exact encounter under the interpolated greedy advisory logic.

    Starts are uniform over the domain at ``tau0`` with COC.  The pilot flies
    a random advisory among the current one and the ``delay`` previous ones,
    with a uniform acceleration from its interval.  A second reversal is
    replaced by the best-scoring non-reversing advisory.  With ``run`` supplied each
    visited node must belong to the reach set of its step.
    """
    if n_sims < 1:
        raise ConfigurationError("n_sims must be >= 1")
    grid, table = model.grid, model.table
    rng = np.random.default_rng(seed)
    layout = NodeLayout(len(grid), cfg.delay, cfg.reversal_limit)
    h = rng.uniform(-dyn.H_LIMIT, dyn.H_LIMIT, n_sims)
    hd = rng.uniform(-dyn.HDOT_LIMIT, dyn.HDOT_LIMIT, n_sims)
    coc = int(dyn.Advisory.COC)
    cur = np.full(n_sims, coc)
    hist = np.full((n_sims, cfg.delay), coc, dtype=np.int64)
    count = np.zeros(n_sims, dtype=np.int64)
    last = np.zeros(n_sims, dtype=np.int64)
    violations, first = 0, None
    row_of = grid.row_map
    for t in range(1, cfg.tau0 + 1):
        tau = cfg.tau0 - t + 1
        pts = np.column_stack([h, hd])
        q = np.empty((n_sims, dyn.N_ADV))
        for s in np.unique(cur):
            sel = cur == s
            q[sel] = interpolate_many(table, pts[sel], int(s), tau)
        if cfg.reversal_limit:
            permitted = np.array(_PERMITTED)[_variant(count, last)]
            ok = ((permitted[:, None] >> np.arange(dyn.N_ADV)) & 1).astype(bool)
            q = np.where(ok, q, -np.inf)
        issued = argmax_actions(q)
        senses = dyn.SENSES[issued]
        rev = (last != 0) & (senses != 0) & (senses != last)
        opts = np.column_stack([cur, hist]) if cfg.delay else cur[:, None]
        pilot = opts[np.arange(n_sims), rng.integers(0, opts.shape[1], n_sims)]
        a = dyn.vcas_sample_accel(pilot, hd, rng, cfg.accel_scale)
        h, hd = dyn.vcas_step_arrays(h, hd, pilot, a)
        if cfg.delay:
            hist = np.column_stack([cur, hist[:, :-1]])
        if cfg.reversal_limit:
            count = np.minimum(2, count + rev)
            last = np.where(senses != 0, senses, last)
        cur = issued
        if run is not None:
            rows2 = np.fromiter((row_of[int(i)] for i in locate_many(grid, np.column_stack([h, hd]))),
                                dtype=np.int64, count=n_sims)
            codes = layout.encode(rows2, cur, hist, count, last)
            members = run[t - 1].codes
            pos = np.clip(np.searchsorted(members, codes), 0, max(0, members.size - 1))
            miss = np.ones(n_sims, dtype=bool) if members.size == 0 else members[pos] != codes
            if miss.any():
                violations += int(miss.sum())
                if first is None:
                    k = int(np.argmax(miss))
                    first = (t, float(h[k]), float(hd[k]), int(cur[k]))
    nmac = int(np.sum(np.abs(h) < dyn.NMAC_H))
    return VcasMcReport(n_sims, nmac, violations, first)

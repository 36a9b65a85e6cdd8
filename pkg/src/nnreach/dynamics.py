"""Benchmark dynamics: mountain car and VerticalCAS.

Both systems expose exact stepping for simulation and sound successor
regions for whole cells.  The reach engine talks to them through the small
``successor_rows`` / ``goal_rows`` interface of the ``*ReachModel`` classes.

Mountain car
    p' = p + v,  v' = v + 0.0015 (u + delta) - 0.0025 cos(3 p),
    then v' is clamped to [-0.07, 0.07] and p' to [-1.2, 0.6].  Reaching
    p = 0.6 is absorbing.  Action index 0/1/2 means u = -1/0/+1.

VerticalCAS
    h is the intruder altitude relative to ownship (ft), so the ownship
    climbing makes h *decrease*:  h' = h - hdot0 dt - a dt^2 / 2 with dt = 1 s.
    Climb rates are reported in ft/min and converted to ft/s internally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .network import MOUNTAIN_CAR_ACTIONS
from .statespace import (Grid, HyperRect, Polytope, grid_from_edges, pairs_intersecting, rows_intersecting,
                         rows_intersecting_box)

# --------------------------------------------------------------------------- mountain car

P_MIN, P_MAX = -1.2, 0.6
V_MIN, V_MAX = -0.07, 0.07
POWER = 0.0015
GRAVITY = 0.0025
GOAL = P_MAX
MC_DOMAIN = HyperRect((P_MIN, V_MIN), (P_MAX, V_MAX))

# The reach grid carries one extra column [GOAL, GOAL_EDGE] holding every goal
# state; goal states are located at GOAL_REPR so they never touch the last
# non-goal column under the closed-box intersection rule.
GOAL_EDGE = 0.618
GOAL_REPR = 0.609

# outward slack on successor regions, covering rounding in the exact step
PAD = 1e-13


@dataclass(frozen=True)
class McConfig:
    w: float = 0.0
    power: float = POWER
    gravity: float = GRAVITY
    goal: float = GOAL

    def __post_init__(self):
        if not (self.w >= 0 and math.isfinite(self.w)):
            raise ValueError(f"disturbance bound w must be a finite number >= 0, got {self.w}")


def mc_action_value(action) -> np.ndarray:
    return np.asarray(MOUNTAIN_CAR_ACTIONS)[np.asarray(action, dtype=np.int64)]


def mc_step(state, u, delta=0.0, clamp: bool = True) -> np.ndarray:
    """One mountain-car step for a state ``(p, v)`` or a batch of them.

    ``u`` is the control value in {-1, 0, 1} (not the action index).  States
    already at the goal are returned unchanged.  ``clamp=False`` gives the raw
    update without domain clamping or goal absorption.
    """
    s = np.asarray(state, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    p, v = s[:, 0], s[:, 1]
    u = np.broadcast_to(np.asarray(u, dtype=float), p.shape)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), p.shape)
    p2 = p + v
    v2 = v + POWER * (u + delta) - GRAVITY * np.cos(3.0 * p)
    if clamp:
        v2 = np.clip(v2, V_MIN, V_MAX)
        p2 = np.clip(p2, P_MIN, P_MAX)
        done = p >= GOAL
        p2 = np.where(done, p, p2)
        v2 = np.where(done, v, v2)
    out = np.column_stack([p2, v2])
    return out[0] if single else out


def mc_worst_case_disturbance(u, w: float):
    """The disturbance that opposes the commanded acceleration: -sign(u) w."""
    return -np.sign(u) * w


def mc_cos_bounds(p_lo, p_hi):
    """Exact range of cos(3p) over [p_lo, p_hi] (array-friendly)."""
    a = 3.0 * np.asarray(p_lo, dtype=float)
    b = 3.0 * np.asarray(p_hi, dtype=float)
    if np.any(a > b):
        raise ValueError("p_lo must not exceed p_hi")
    ca, cb = np.cos(a), np.cos(b)
    lo, hi = np.minimum(ca, cb), np.maximum(ca, cb)
    # interior critical points x = k pi: even k is a maximum, odd k a minimum
    k_first = np.ceil(a / np.pi)
    k_last = np.floor(b / np.pi)
    has_even = (k_last >= k_first) & ((np.mod(k_first, 2) == 0) | (k_last > k_first))
    has_odd = (k_last >= k_first) & ((np.mod(k_first, 2) == 1) | (k_last > k_first))
    hi = np.where(has_even, 1.0, hi)
    lo = np.where(has_odd, -1.0, lo)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def mc_polytope_offsets(lo, hi, u, w: float) -> np.ndarray:
    """Right-hand sides of the six successor constraints for a batch of cells.

    Constraint normals are fixed (see ``MC_NORMALS``); rows of the result
    match them.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    u = np.broadcast_to(np.asarray(u, dtype=float), lo.shape[:1])
    cp_min, cp_max = mc_cos_bounds(lo[:, 0], hi[:, 0])
    cp_min, cp_max = np.atleast_1d(cp_min), np.atleast_1d(cp_max)
    pmin, vmin, pmax, vmax = lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]
    low_push = POWER * (u - w)
    high_push = POWER * (u + w)
    b = np.column_stack([
        -(pmin + vmin),
        pmax + vmax,
        -(vmin - GRAVITY * cp_max + low_push),
        vmax - GRAVITY * cp_min + high_push,
        pmax + GRAVITY * cp_max - low_push,
        -pmin - GRAVITY * cp_min + high_push,
    ])
    return b + PAD


MC_NORMALS = np.array([
    [-1.0, 0.0],
    [1.0, 0.0],
    [0.0, -1.0],
    [0.0, 1.0],
    [1.0, -1.0],
    [-1.0, 1.0],
])


def mc_reach_polytope(cell: HyperRect, u, w: float) -> Polytope:
    """The six-constraint polygon bounding unclamped successors of ``cell`` under ``u``.

    Clamping at the domain edges is *not* folded in here, since intersecting
    with the domain box would drop clamped successors; ``mc_successor_regions``
    returns the clamped image.
    """
    if cell.dim != 2:
        raise ValueError("mountain-car cells are two-dimensional")
    b = mc_polytope_offsets(cell.lo_array, cell.hi_array, u, w)[0]
    return Polytope(MC_NORMALS, b)


def _line_pairs():
    pairs = []
    for i in range(6):
        for j in range(i + 1, 6):
            if abs(np.linalg.det(MC_NORMALS[[i, j]])) > 0:
                pairs.append((i, j))
    return np.array(pairs)


_PAIRS = _line_pairs()


def mc_polygon_bbox(b: np.ndarray, tol: float = 1e-12):
    """Bounding boxes of a batch of six-constraint polygons.

    Vertices are the feasible pairwise intersections of the constraint lines.
    Returns ``(lo, hi, nonempty)``.
    """
    b = np.atleast_2d(b)
    a = MC_NORMALS
    i, j = _PAIRS[:, 0], _PAIRS[:, 1]
    det = a[i, 0] * a[j, 1] - a[i, 1] * a[j, 0]
    x = (b[:, i] * a[j, 1] - b[:, j] * a[i, 1]) / det
    y = (a[i, 0] * b[:, j] - a[j, 0] * b[:, i]) / det
    pts = np.stack([x, y], axis=-1)  # (K, pairs, 2)
    feas = np.all(pts @ a.T <= b[:, None, :] + tol, axis=2)
    nonempty = feas.any(axis=1)
    big = np.where(feas[..., None], pts, np.inf)
    small = np.where(feas[..., None], pts, -np.inf)
    return big.min(axis=1), small.max(axis=1), nonempty


_BIG = 10.0
_P_BANDS = ((-_BIG, P_MIN), (P_MIN, P_MAX), (P_MAX, _BIG))
_V_BANDS = ((-_BIG, V_MIN), (V_MIN, V_MAX), (V_MAX, _BIG))


def mc_regions_from_offsets(b: np.ndarray) -> list:
    """Clamped successor image of one cell as a list of convex pieces.

    The polygon is cut into the nine sectors around the domain box.  The
    central piece stays a polygon; each outer piece is clamped onto an edge
    or corner of the box, where its image is exactly the bounding segment or
    point of its clamped vertices.  Pieces past the goal line collapse onto
    the goal column.
    """
    poly = Polytope(MC_NORMALS, b)
    everything = HyperRect((-_BIG, -_BIG), (_BIG, _BIG))
    verts = poly.vertices(everything)
    if verts.shape[0] == 0:
        return []
    vlo, vhi = verts.min(axis=0), verts.max(axis=0)
    if vlo[0] >= P_MIN and vhi[0] < P_MAX and vlo[1] >= V_MIN and vhi[1] <= V_MAX:
        return [poly]
    pieces = []
    for i, (pa, pb) in enumerate(_P_BANDS):
        for j, (va, vb) in enumerate(_V_BANDS):
            if pb < vlo[0] or pa > vhi[0] or vb < vlo[1] or va > vhi[1]:
                continue
            sector = HyperRect((pa, va), (pb, vb))
            if i == 1 and j == 1:
                central = poly.intersect(Polytope.from_box(sector))
                if central.vertices(sector).shape[0]:
                    pieces.append(central)
                continue
            sv = poly.vertices(sector)
            if sv.shape[0] == 0:
                continue
            sv = np.column_stack([np.clip(sv[:, 0], P_MIN, P_MAX), np.clip(sv[:, 1], V_MIN, V_MAX)])
            lo, hi = sv.min(axis=0), sv.max(axis=0)
            if i == 2:
                lo[0] = hi[0] = GOAL_REPR
            pieces.append(HyperRect(lo, hi))
    return pieces


def mc_successor_regions(cell: HyperRect, u, w: float) -> list:
    """Convex pieces covering every clamped successor of ``cell`` (goal cells map to themselves)."""
    if cell.lo[0] >= GOAL:
        return [cell]
    return mc_regions_from_offsets(mc_polytope_offsets(cell.lo_array, cell.hi_array, u, w)[0])


def mc_reach_grid(counts=(100, 100)) -> Grid:
    """Uniform mountain-car grid plus the goal column ``[0.6, 0.618]``."""
    np_, nv = (int(c) for c in counts)
    if np_ < 1 or nv < 1:
        raise ValueError("cell counts must be >= 1")
    p_edges = np.append(np.linspace(P_MIN, P_MAX, np_ + 1), GOAL_EDGE)
    v_edges = np.linspace(V_MIN, V_MAX, nv + 1)
    return grid_from_edges([p_edges, v_edges])


def mc_location_points(states) -> np.ndarray:
    """Map simulated states to points for cell lookup (goal states -> goal column)."""
    s = np.array(states, dtype=float, ndmin=2)
    s[:, 0] = np.where(s[:, 0] >= GOAL, GOAL_REPR, s[:, 0])
    return s


class McReachModel:
    """Mountain-car successor oracle for the reach engine."""

    n_actions = 3

    def __init__(self, w: float = 0.0):
        self.config = McConfig(w=float(w))

    @property
    def w(self) -> float:
        return self.config.w

    def goal_rows(self, grid: Grid) -> np.ndarray:
        return grid.lo[:, 0] >= GOAL

    def successor_rows(self, grid: Grid, row: int, action: int) -> np.ndarray:
        if grid.lo[row, 0] >= GOAL:
            return np.array([row], dtype=np.int64)
        u = MOUNTAIN_CAR_ACTIONS[action]
        b = mc_polytope_offsets(grid.lo[row], grid.hi[row], u, self.w)[0]
        hits = []
        for piece in mc_regions_from_offsets(b):
            if isinstance(piece, Polytope):
                hits.append(rows_intersecting(grid, piece))
            else:
                hits.append(rows_intersecting_box(grid, piece.lo_array, piece.hi_array))
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(hits))

    def batch_successors(self, grid: Grid, rows: np.ndarray, actions: np.ndarray):
        """Successor rows for many (row, action) pairs at once: returns (pair index, row)."""
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        goal = grid.lo[rows, 0] >= GOAL
        out_q, out_r = [np.flatnonzero(goal)], [rows[goal]]
        live = np.flatnonzero(~goal)
        if live.size:
            u = mc_action_value(actions[live])
            b = mc_polytope_offsets(grid.lo[rows[live]], grid.hi[rows[live]], u, self.w)
            lo, hi, nonempty = mc_polygon_bbox(b)
            inside = nonempty & (lo[:, 0] >= P_MIN) & (hi[:, 0] < P_MAX) & (lo[:, 1] >= V_MIN) & (hi[:, 1] <= V_MAX)
            fast = np.flatnonzero(inside)
            qi, rr = pairs_intersecting(grid, lo[fast], hi[fast], MC_NORMALS, b[fast])
            out_q.append(live[fast[qi]])
            out_r.append(rr)
            for k in np.flatnonzero(~inside):
                s = self.successor_rows(grid, int(rows[live[k]]), int(actions[live[k]]))
                out_q.append(np.full(s.size, live[k], dtype=np.int64))
                out_r.append(s)
        return np.concatenate(out_q), np.concatenate(out_r)

    def sample_states(self, grid: Grid, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Uniform points inside the given cells (goal cells give p = GOAL)."""
        t = rng.random((rows.size, 2))
        pts = grid.lo[rows] + t * (grid.hi[rows] - grid.lo[rows])
        pts[:, 0] = np.where(grid.lo[rows, 0] >= GOAL, GOAL, np.minimum(pts[:, 0], np.nextafter(GOAL, -1.0)))
        return pts


# --------------------------------------------------------------------------- VerticalCAS

G = 32.2
FPM = 60.0  # ft/min per ft/s
H_LIMIT = 3000.0
HDOT_LIMIT = 2500.0
NMAC_H = 100.0
TAU_MAX = 40


class Advisory(enum.IntEnum):
    COC = 0
    DNC = 1
    DND = 2
    DES1500 = 3
    CL1500 = 4
    SDES1500 = 5
    SCL1500 = 6
    SDES2500 = 7
    SCL2500 = 8

    @property
    def sense(self) -> int:
        """+1 climb, -1 descend, 0 none."""
        return _SENSE[self]

    @property
    def sense_name(self) -> str:
        return {1: "up", -1: "down", 0: "none"}[self.sense]

    @property
    def target(self) -> float | None:
        """Compliance climb-rate bound in ft/min (None for COC)."""
        return _TARGET[self]

    @property
    def strengthened(self) -> bool:
        return self >= Advisory.SDES1500

    @property
    def strength(self) -> int:
        return _STRENGTH[self]


_SENSE = {Advisory.COC: 0, Advisory.DNC: -1, Advisory.DND: 1, Advisory.DES1500: -1, Advisory.CL1500: 1,
          Advisory.SDES1500: -1, Advisory.SCL1500: 1, Advisory.SDES2500: -1, Advisory.SCL2500: 1}
_TARGET = {Advisory.COC: None, Advisory.DNC: 0.0, Advisory.DND: 0.0, Advisory.DES1500: -1500.0,
           Advisory.CL1500: 1500.0, Advisory.SDES1500: -1500.0, Advisory.SCL1500: 1500.0,
           Advisory.SDES2500: -2500.0, Advisory.SCL2500: 2500.0}
_STRENGTH = {Advisory.COC: 0, Advisory.DNC: 1, Advisory.DND: 1, Advisory.DES1500: 2, Advisory.CL1500: 2,
             Advisory.SDES1500: 3, Advisory.SCL1500: 3, Advisory.SDES2500: 4, Advisory.SCL2500: 4}

N_ADV = len(Advisory)
SENSES = np.array([a.sense for a in Advisory])
TARGETS_FPS = np.array([0.0 if a.target is None else a.target / FPM for a in Advisory])


def advisory_table() -> list[dict]:
    return [{"index": int(a), "name": a.name, "sense": a.sense_name, "target_fpm": a.target,
             "strengthened": a.strengthened, "strength": a.strength} for a in Advisory]


def is_compliant(adv, hdot0_fpm) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.int64)
    h = np.asarray(hdot0_fpm, dtype=float)
    sense = SENSES[adv]
    tgt = TARGETS_FPS[adv] * FPM
    return np.where(sense > 0, h >= tgt, np.where(sense < 0, h <= tgt, True))


def _accel_magnitudes(adv, accel_scale: float):
    """(low, high) magnitude of the acceleration toward compliance, plus the COC bound."""
    adv = np.asarray(adv, dtype=np.int64)
    strong = adv >= int(Advisory.SDES1500)
    low = np.where(strong, G / 3.0, G / 4.0)
    high = np.full(adv.shape, accel_scale * G / 3.0)
    return low, high


def vcas_accel_bounds(adv, hdot0_fpm, accel_scale: float = 1.0):
    """Vectorised signed acceleration interval (ft/s^2) for the executed advisory."""
    if accel_scale < 1.0:
        raise ValueError("accel_scale must be >= 1 (it relaxes the compliance intervals)")
    adv = np.asarray(adv, dtype=np.int64)
    hd = np.asarray(hdot0_fpm, dtype=float)
    adv, hd = np.broadcast_arrays(adv, hd)
    low, high = _accel_magnitudes(adv, accel_scale)
    sense = SENSES[adv]
    coc = accel_scale * G / 8.0
    lo = np.where(sense > 0, low, np.where(sense < 0, -high, -coc))
    hi = np.where(sense > 0, high, np.where(sense < 0, -low, coc))
    ok = is_compliant(adv, hd) & (sense != 0)
    return np.where(ok, 0.0, lo), np.where(ok, 0.0, hi)


def vcas_accel_interval(adv, hdot0_fpm: float, accel_scale: float = 1.0) -> tuple[float, float]:
    lo, hi = vcas_accel_bounds(int(adv), float(hdot0_fpm), accel_scale)
    return float(lo), float(hi)


def _advance(v, a, sense, target):
    """Climb rate after one second and altitude gained, with compliance pinning.

    ``v`` in ft/s; ``target`` in ft/s.  For a climbing sense the rate is
    ``max(v, min(v + a t, target))``, mirrored for descending; both are
    nondecreasing in ``v`` and ``a``, which the interval bounds rely on.
    """
    v, a, sense, target = np.broadcast_arrays(np.asarray(v, float), np.asarray(a, float),
                                              np.asarray(sense), np.asarray(target, float))
    free_v = v + a
    free_d = v + 0.5 * a
    s = np.where(sense == 0, 1.0, sense.astype(float))
    # work in a frame where the advisory pushes upward
    vv, aa, tt = s * v, s * a, s * target
    moving = (sense != 0) & (vv < tt) & (aa > 0)
    safe_a = np.where(moving, aa, 1.0)
    t_star = np.where(moving, (tt - vv) / safe_a, np.inf)
    pinned = moving & (t_star < 1.0)
    ts = np.where(pinned, t_star, 0.0)
    pin_d = vv * ts + 0.5 * aa * ts * ts + tt * (1.0 - ts)
    new_v = np.where(pinned, s * tt, free_v)
    disp = np.where(pinned, s * pin_d, free_d)
    # already compliant: the climb rate is held
    held = (sense != 0) & (vv >= tt)
    new_v = np.where(held, v, new_v)
    disp = np.where(held, v, disp)
    return new_v, disp


@dataclass(frozen=True)
class VcState:
    h: float
    hdot0: float
    tau: int
    s_adv: Advisory

    def __post_init__(self):
        object.__setattr__(self, "s_adv", Advisory(self.s_adv))
        if not 0 <= int(self.tau) <= TAU_MAX:
            raise ValueError(f"tau must lie in 0..{TAU_MAX}")


class TerminalStateError(ValueError):
    pass


def vcas_step(s: VcState, new_adv, a: float) -> VcState:
    """Advance one second; the pilot flies ``s.s_adv`` while ``new_adv`` is issued."""
    if s.tau <= 0:
        raise TerminalStateError("no step is defined from tau = 0")
    hp, hdp = vcas_step_arrays(np.array([s.h]), np.array([s.hdot0]), np.array([int(s.s_adv)]), np.array([a]))
    return VcState(float(hp[0]), float(hdp[0]), s.tau - 1, Advisory(new_adv))


def vcas_step_arrays(h, hdot0_fpm, pilot_adv, a):
    """Vectorised exact step: returns (h', hdot0' in ft/min), clamped to the domain."""
    pilot_adv = np.asarray(pilot_adv, dtype=np.int64)
    v = np.asarray(hdot0_fpm, dtype=float) / FPM
    new_v, disp = _advance(v, a, SENSES[pilot_adv], TARGETS_FPS[pilot_adv])
    h2 = np.clip(np.asarray(h, dtype=float) - disp, -H_LIMIT, H_LIMIT)
    hd2 = np.clip(new_v * FPM, -HDOT_LIMIT, HDOT_LIMIT)
    return h2, hd2


def vcas_rect_bounds(lo, hi, pilot_adv, accel_scale: float = 1.0):
    """Successor boxes for a batch of (h, hdot0) cells flown under ``pilot_adv``."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    pilot_adv = np.broadcast_to(np.asarray(pilot_adv, dtype=np.int64), lo.shape[:1])
    sense = SENSES[pilot_adv]
    tgt = TARGETS_FPS[pilot_adv]
    # the noncompliant interval also covers compliant states (they ignore a)
    low, high = _accel_magnitudes(pilot_adv, accel_scale)
    coc = accel_scale * G / 8.0
    a_lo = np.where(sense > 0, low, np.where(sense < 0, -high, -coc))
    a_hi = np.where(sense > 0, high, np.where(sense < 0, -low, coc))
    v_lo, v_hi = lo[:, 1] / FPM, hi[:, 1] / FPM
    nv_lo, d_lo = _advance(v_lo, a_lo, sense, tgt)
    nv_hi, d_hi = _advance(v_hi, a_hi, sense, tgt)
    out_lo = np.column_stack([lo[:, 0] - d_hi, nv_lo * FPM])
    out_hi = np.column_stack([hi[:, 0] - d_lo, nv_hi * FPM])
    # slack for rounding, then the domain clamp (monotone, so bounds stay valid)
    pad = 1e-9
    out_lo = out_lo - pad
    out_hi = out_hi + pad
    box_lo = np.array([-H_LIMIT, -HDOT_LIMIT])
    box_hi = np.array([H_LIMIT, HDOT_LIMIT])
    return np.clip(out_lo, box_lo, box_hi), np.clip(out_hi, box_lo, box_hi)


def vcas_reach_rect(cell: HyperRect, current_adv, issued_adv=None, accel_scale: float = 1.0) -> HyperRect:
    """Box holding every successor of ``cell`` while the pilot flies ``current_adv``.

    ``issued_adv`` only changes the discrete part of the successor and does not
    influence the geometry of this step.
    """
    lo, hi = vcas_rect_bounds(cell.lo_array, cell.hi_array, int(current_adv), accel_scale)
    return HyperRect(lo[0], hi[0])


def vcas_sample_accel(adv, hdot0_fpm, rng: np.random.Generator, accel_scale: float = 1.0):
    lo, hi = vcas_accel_bounds(adv, hdot0_fpm, accel_scale)
    return lo + rng.random(np.shape(lo)) * (hi - lo)


def vcas_reach_grid(inner_cells: int = 60, hdot_cells: int = 24, outer_width: float = 250.0,
                    inner: float = 1000.0) -> Grid:
    """(h, hdot0) grid: uniform cells on [-inner, inner], coarser bands out to the domain edge."""
    if inner_cells < 1 or hdot_cells < 1 or outer_width <= 0:
        raise ValueError("grid counts and band width must be positive")
    core = np.linspace(-inner, inner, inner_cells + 1)
    n_out = max(1, int(math.ceil((H_LIMIT - inner) / outer_width)))
    outer = np.linspace(inner, H_LIMIT, n_out + 1)[1:]
    h_edges = np.concatenate([-outer[::-1], core, outer])
    v_edges = np.linspace(-HDOT_LIMIT, HDOT_LIMIT, hdot_cells + 1)
    return grid_from_edges([h_edges, v_edges])


def nmac_rows(grid: Grid) -> np.ndarray:
    """Cells whose closed box meets the open band |h| < 100 ft."""
    return (grid.lo[:, 0] < NMAC_H) & (grid.hi[:, 0] > -NMAC_H)

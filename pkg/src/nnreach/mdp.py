"""Grid MDPs, value iteration with multilinear interpolation, and Q-network training."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import scipy.sparse as sp

from . import dynamics as dyn
from .network import Network, argmax_actions, evaluate

EXPECTED_MAX = "expected-max"
MAX_EXPECTED = "max-expected"


class ConvergenceWarning(UserWarning):
    pass


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- interpolation

def interp_weights(axes, points) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices (flat, C order) and multilinear weights for each point.

    Points are clamped to the axis ranges first.  Returns arrays of shape
    ``(m, 2**d)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = len(axes)
    if pts.shape[1] != d:
        raise ValueError(f"points have dimension {pts.shape[1]}, grid has {d}")
    sizes = [len(a) for a in axes]
    lows, fracs = [], []
    for k, a in enumerate(axes):
        x = np.clip(pts[:, k], a[0], a[-1])
        if len(a) == 1:
            lows.append(np.zeros(x.size, dtype=np.int64))
            fracs.append(np.zeros(x.size))
            continue
        i = np.clip(np.searchsorted(a, x, side="right") - 1, 0, len(a) - 2)
        t = np.clip((x - a[i]) / (a[i + 1] - a[i]), 0.0, 1.0)
        lows.append(i)
        fracs.append(t)
    idx = np.zeros((pts.shape[0], 2 ** d), dtype=np.int64)
    wts = np.ones((pts.shape[0], 2 ** d))
    for c, bits in enumerate(itertools.product((0, 1), repeat=d)):
        flat = np.zeros(pts.shape[0], dtype=np.int64)
        for k, bit in enumerate(bits):
            step = 1 if sizes[k] > 1 else 0
            flat = flat * sizes[k] + lows[k] + bit * step
            wts[:, c] *= fracs[k] if bit else 1.0 - fracs[k]
        idx[:, c] = flat
    return idx, wts


def grid_points(axes) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


# --------------------------------------------------------------------------- MDP + tables

@dataclass(frozen=True, eq=False)
class MdpSpec:
    """A tabulated MDP over ``discrete x grid`` states.

    States are numbered ``discrete_index * n_grid + grid_index`` with the
    grid index in C order over ``axes``.  Each (state, action) pair has ``k``
    weighted successors given as continuous points (interpolated over the
    grid) plus a successor discrete index.  With ``stages`` set the problem
    is a finite-horizon one: stage 0 is terminal with ``terminal_rewards``,
    stage ``t`` transitions into stage ``t - 1``.
    """

    axes: tuple
    actions: tuple
    rewards: np.ndarray
    next_points: np.ndarray
    probs: np.ndarray
    discrete: tuple = ()
    next_discrete: np.ndarray | None = None
    stages: int | None = None
    terminal_rewards: np.ndarray | None = None
    combine: str = "expect"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        for a in axes:
            if a.ndim != 1 or a.size < 1 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be strictly increasing coordinate lists")
        n, m = self.n_states, len(self.actions)
        if self.rewards.shape != (n, m):
            raise ValueError(f"rewards must have shape {(n, m)}, got {self.rewards.shape}")
        if self.probs.ndim != 3 or self.probs.shape[:2] != (n, m):
            raise ValueError("probs must have shape (states, actions, k)")
        if self.next_points.shape != self.probs.shape + (len(axes),):
            raise ValueError("next_points must have shape (states, actions, k, dims)")
        if np.any(self.probs < 0) or np.max(np.abs(self.probs.sum(axis=2) - 1.0)) > 1e-9:
            raise ValueError("successor probabilities must be non-negative and sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if self.next_discrete is not None and self.next_discrete.shape != (n, m):
            raise ValueError("next_discrete must have shape (states, actions)")
        if self.combine not in ("expect", "worst"):
            raise ValueError(f"combine must be 'expect' or 'worst', got {self.combine!r}")
        if self.stages is not None and (self.stages < 0 or self.terminal_rewards is None):
            raise ValueError("a staged MDP needs stages >= 0 and terminal rewards")

    @property
    def n_grid(self) -> int:
        return int(np.prod([a.size for a in self.axes]))

    @property
    def n_discrete(self) -> int:
        return int(np.prod([c for _, c in self.discrete])) if self.discrete else 1

    @property
    def n_states(self) -> int:
        return self.n_grid * self.n_discrete

    def transition_matrix(self, successor: int | None = None) -> sp.csr_matrix:
        """Sparse ``(states * actions) x states`` kernel including interpolation weights.

        With ``successor`` set, only that successor column is used (weight 1),
        which is how the worst-case combination is evaluated.
        """
        n, m, k = self.probs.shape
        d = len(self.axes)
        pts = self.next_points if successor is None else self.next_points[:, :, successor:successor + 1]
        probs = self.probs if successor is None else np.ones((n, m, 1))
        kk = probs.shape[2]
        idx, wts = interp_weights(self.axes, pts.reshape(-1, d))
        corners = idx.shape[1]
        disc = np.zeros((n, m), dtype=np.int64) if self.next_discrete is None else self.next_discrete
        base = np.repeat(disc.reshape(-1), kk) * self.n_grid
        cols = (idx + base[:, None]).reshape(-1)
        vals = (wts * probs.reshape(-1)[:, None]).reshape(-1)
        rows = np.repeat(np.arange(n * m), kk * corners)
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(n * m, n))
        mat.sum_duplicates()
        return mat


@dataclass(frozen=True, eq=False)
class QTable:
    axes: tuple
    actions: tuple
    values: np.ndarray
    discrete: tuple = ()
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    residual_monotone: bool = True

    @property
    def staged(self) -> bool:
        return self.values.ndim == 3

    @property
    def n_grid(self) -> int:
        return int(np.prod([len(a) for a in self.axes]))

    def stage(self, t: int | None) -> np.ndarray:
        if self.staged:
            if t is None:
                raise ValueError("this table is staged; pass a stage index")
            return self.values[int(t)]
        return self.values


def value_iteration(spec: MdpSpec, tol: float = 1e-6, max_iters: int = 2000,
                    backup: str = EXPECTED_MAX, floor: float | None = None) -> QTable:
    """Undiscounted Bellman iteration from Q = 0.

    ``backup`` picks where the max sits: ``expected-max`` averages the best
    successor value (the usual optimal-control backup); ``max-expected``
    takes the max over next actions of the averaged successor values.
    ``floor`` clips values from below, so actions that can loop forever
    settle at the floor instead of diverging.
    """
    if backup not in (EXPECTED_MAX, MAX_EXPECTED):
        raise ValueError(f"unknown backup {backup!r}")
    n, m = spec.rewards.shape
    if spec.combine == "expect":
        mats = [spec.transition_matrix()]
    else:
        mats = [spec.transition_matrix(j) for j in range(spec.probs.shape[2])]

    def apply(q):
        if backup == EXPECTED_MAX:
            v = q.max(axis=1)
            succ = [(t @ v).reshape(n, m) for t in mats]
        else:
            succ = [(t @ q).max(axis=1).reshape(n, m) for t in mats]
        return spec.rewards + (succ[0] if len(succ) == 1 else np.minimum.reduce(succ))

    if spec.stages is not None:
        out = np.empty((spec.stages + 1, n, m))
        out[0] = spec.terminal_rewards
        for t in range(1, spec.stages + 1):
            out[t] = apply(out[t - 1])
        resid = float(np.max(np.abs(out[-1] - out[-2]))) if spec.stages else 0.0
        return QTable(spec.axes, tuple(spec.actions), out, tuple(spec.discrete), True, spec.stages, resid, True)

    q = np.zeros((n, m))
    prev_res = np.inf
    monotone = True
    res = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        q_new = apply(q)
        if floor is not None:
            q_new = np.maximum(q_new, floor)
        res = float(np.max(np.abs(q_new - q)))
        if res > prev_res + 1e-9:
            monotone = False
        prev_res = res
        q = q_new
        if res < tol:
            break
    converged = res < tol
    if not converged:
        warnings.warn(f"value iteration stopped after {it} sweeps with residual {res:.3g}", ConvergenceWarning)
    return QTable(spec.axes, tuple(spec.actions), q, tuple(spec.discrete), converged, it, res, monotone)


def interpolate_many(table: QTable, points, discrete_index=0, stage=None) -> np.ndarray:
    vals = table.stage(stage)
    idx, wts = interp_weights(table.axes, points)
    disc = np.broadcast_to(np.asarray(discrete_index, dtype=np.int64), idx.shape[:1])
    flat = idx + (disc * table.n_grid)[:, None]
    return np.einsum("pc,pca->pa", wts, vals[flat])


def interpolate_q(table: QTable, s, discrete_index: int = 0, stage: int | None = None) -> np.ndarray:
    """Per-action values at continuous state ``s`` (clamped into the grid)."""
    return interpolate_many(table, np.asarray(s, dtype=float)[None], discrete_index, stage)[0]


def greedy_actions(table: QTable, points, discrete_index=0, stage=None) -> np.ndarray:
    return argmax_actions(interpolate_many(table, points, discrete_index, stage))


def _breakpoints(axis: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Per-cell sorted coordinates: both ends plus every axis point strictly inside.

    Short rows are padded by repeating ``lo``.
    """
    start = np.searchsorted(axis, lo, side="right")
    stop = np.searchsorted(axis, hi, side="left")
    count = np.maximum(stop - start, 0)
    width = int(count.max(initial=0)) + 2
    out = np.repeat(lo[:, None], width, axis=1)
    out[:, 1] = hi
    for j in range(width - 2):
        take = j < count
        pos = np.minimum(start + j, axis.size - 1)
        out[:, 2 + j] = np.where(take, axis[pos], lo)
    return out


def tabular_action_masks(table: QTable, lo, hi, discrete_index=0, stage=None, chunk: int = 2048,
                         subsets=None) -> np.ndarray:
    """Sound action-set masks of the interpolated greedy policy over boxes.

    Inside each box the interpolant is multilinear on every sub-box cut by
    the grid coordinates, so a difference of two action values peaks at one
    of the cut points.  Action ``a`` is dropped only when some ``b`` is
    strictly better at all of them.

    With ``subsets`` (a list of action bitmasks) the greedy choice is taken
    over each subset in turn and the result has shape ``(len(subsets), n)``.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    n, d = lo.shape
    vals = table.stage(stage)
    tol = 1e-9 * (1.0 + float(np.max(np.abs(vals))))
    m = vals.shape[1]
    disc = np.broadcast_to(np.asarray(discrete_index, dtype=np.int64), (n,))
    weights = 1 << np.arange(m, dtype=np.int64)
    single = subsets is None
    subsets = [int(weights.sum())] if single else [int(x) for x in subsets]
    member = np.array([[(sub >> a) & 1 for a in range(m)] for sub in subsets], dtype=bool)
    out = np.empty((len(subsets), n), dtype=np.int64)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        c_lo = np.clip(lo[sl], [a[0] for a in table.axes], [a[-1] for a in table.axes])
        c_hi = np.clip(hi[sl], [a[0] for a in table.axes], [a[-1] for a in table.axes])
        per_dim = [_breakpoints(table.axes[k], c_lo[:, k], c_hi[:, k]) for k in range(d)]
        grids = np.meshgrid(*[np.arange(p.shape[1]) for p in per_dim], indexing="ij")
        combo = [g.ravel() for g in grids]
        pts = np.stack([per_dim[k][:, combo[k]] for k in range(d)], axis=-1)  # (c, P, d)
        c, npts = pts.shape[:2]
        q = interpolate_many(table, pts.reshape(-1, d), np.repeat(disc[sl], npts), stage).reshape(c, npts, m)
        rows = np.arange(c)
        for k, inside in enumerate(member):
            # cheap pass: compare everything with the leader at the first point,
            # which can never be beaten itself; only ambiguous boxes need all pairs
            lead = np.argmax(np.where(inside, q[:, 0, :], -np.inf), axis=1)
            beaten = (q - q[rows, :, lead][:, :, None]).max(axis=1) < -tol
            keep = inside[None, :] & ~beaten
            hard = np.flatnonzero(keep.sum(axis=1) > 1)
            if hard.size:
                qh = q[hard]
                diff_max = (qh[:, :, :, None] - qh[:, :, None, :]).max(axis=1)  # (c, a, b)
                keep[hard] = inside[None, :] & ~np.any((diff_max < -tol) & inside[None, None, :], axis=2)
            out[k, sl] = keep.astype(np.int64) @ weights
    return out[0] if single else out


def dump_qtable(table: QTable, stream: TextIO, header=()) -> None:
    for line in header:
        stream.write(f"# {line}\n")
    for k, a in enumerate(table.axes):
        stream.write(f"axis{k}=" + ",".join(repr(float(x)) for x in a) + "\n")
    if table.discrete:
        stream.write("discrete=" + ",".join(f"{n}:{c}" for n, c in table.discrete) + "\n")
    if table.staged:
        stream.write(f"stages={table.values.shape[0]}\n")
    stream.write("actions=" + ",".join(str(a) for a in table.actions) + "\n")
    stream.write(f"converged={int(table.converged)} iterations={table.iterations} residual={table.residual!r}\n")
    sizes = [len(a) for a in table.axes]
    disc_sizes = [c for _, c in table.discrete]
    stage_range = range(table.values.shape[0]) if table.staged else [None]
    for t in stage_range:
        vals = table.stage(t)
        for flat in range(vals.shape[0]):
            d_idx, g_idx = divmod(flat, table.n_grid)
            key = list(np.unravel_index(d_idx, disc_sizes)) if disc_sizes else []
            key += list(np.unravel_index(g_idx, sizes))
            if t is not None:
                key = [t] + key
            stream.write(" ".join(str(int(i)) for i in key) + " : " + ",".join(repr(float(x)) for x in vals[flat]) + "\n")


def load_qtable(stream: TextIO) -> QTable:
    axes, discrete, actions, stages = [], [], None, None
    meta = {"converged": True, "iterations": 0, "residual": 0.0}
    rows = []
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if ":" in line and "=" not in line:
                key, vals = line.split(":")
                rows.append(([int(i) for i in key.split()], [float(v) for v in vals.split(",")]))
            elif line.startswith("axis"):
                axes.append(np.array([float(x) for x in line.split("=", 1)[1].split(",")]))
            elif line.startswith("discrete="):
                discrete = [(n, int(c)) for n, c in (item.split(":") for item in line[9:].split(","))]
            elif line.startswith("stages="):
                stages = int(line[7:])
            elif line.startswith("actions="):
                actions = tuple(int(a) if a.lstrip("-").isdigit() else a for a in line[8:].split(","))
            elif line.startswith("converged="):
                parts = dict(p.split("=") for p in line.split())
                meta = {"converged": bool(int(parts["converged"])), "iterations": int(parts["iterations"]),
                        "residual": float(parts["residual"])}
            else:
                raise ValueError(line)
        except ValueError:
            raise ValueError(f"line {lineno}: cannot parse Q-table entry") from None
    if not axes or actions is None:
        raise ValueError("Q-table header is incomplete (needs axis lines and actions=)")
    sizes = [len(a) for a in axes]
    disc_sizes = [c for _, c in discrete]
    n = int(np.prod(sizes)) * (int(np.prod(disc_sizes)) if disc_sizes else 1)
    shape = ((stages,) if stages else ()) + (n, len(actions))
    values = np.full(shape, np.nan)
    dims = ([stages] if stages else []) + disc_sizes + sizes
    for key, vals in rows:
        if len(key) != len(dims) or len(vals) != len(actions):
            raise ValueError(f"Q-table row {key} has the wrong shape")
        lead = (key[0],) if stages else ()
        flat = int(np.ravel_multi_index(key[len(lead):], disc_sizes + sizes))
        values[lead + (flat,)] = vals
    if np.any(np.isnan(values)):
        raise ValueError("Q-table file does not cover every grid point")
    return QTable(tuple(axes), actions, values, tuple(discrete), **meta)


# --------------------------------------------------------------------------- benchmark MDPs

def mountain_car_spec(n_p: int = 100, n_v: int = 100, disturbances=(-0.5, 0.0, 0.5), combine: str = "expect") -> MdpSpec:
    """Mountain-car MDP on an ``n_p x n_v`` point grid.

    ``combine="worst"`` scores each action by its worst disturbance outcome
    instead of the average, which yields a policy for the adversarial setting.
    """
    p_axis = np.linspace(dyn.P_MIN, dyn.P_MAX, n_p)
    v_axis = np.linspace(dyn.V_MIN, dyn.V_MAX, n_v)
    pts = grid_points((p_axis, v_axis))
    n = pts.shape[0]
    actions = (-1, 0, 1)
    k = len(disturbances)
    nxt = np.empty((n, len(actions), k, 2))
    for ai, u in enumerate(actions):
        for j, delta in enumerate(disturbances):
            nxt[:, ai, j] = dyn.mc_step(pts, u, delta)
    reward = np.where(pts[:, 0] < dyn.GOAL, -1.0, 0.0)
    rewards = np.repeat(reward[:, None], len(actions), axis=1)
    probs = np.full((n, len(actions), k), 1.0 / k)
    return MdpSpec((p_axis, v_axis), actions, rewards, nxt, probs, combine=combine, meta={"system": "mountaincar"})


def mountain_car_robust_spec(w: float, n_p: int = 100, n_v: int = 100) -> MdpSpec:
    """Worst-case mountain-car MDP for disturbances bounded by ``w``.

    Besides the two extreme disturbances, each action also faces the
    disturbance in [-w, w] that comes closest to cancelling its net
    acceleration.  That successor exposes states where an adversary can hold
    the car still; their value then drops to the floor passed to
    ``value_iteration`` and the greedy policy avoids them.
    """
    if w < 0:
        raise ValueError("w must be >= 0")
    p_axis = np.linspace(dyn.P_MIN, dyn.P_MAX, n_p)
    v_axis = np.linspace(dyn.V_MIN, dyn.V_MAX, n_v)
    pts = grid_points((p_axis, v_axis))
    n = pts.shape[0]
    actions = (-1, 0, 1)
    nxt = np.empty((n, len(actions), 3, 2))
    for ai, u in enumerate(actions):
        balance = (dyn.GRAVITY * np.cos(3.0 * pts[:, 0]) - dyn.POWER * u) / dyn.POWER
        for j, delta in enumerate((-w, np.clip(balance, -w, w), w)):
            nxt[:, ai, j] = dyn.mc_step(pts, u, delta)
    reward = np.where(pts[:, 0] < dyn.GOAL, -1.0, 0.0)
    rewards = np.repeat(reward[:, None], len(actions), axis=1)
    probs = np.full((n, len(actions), 3), 1.0 / 3.0)
    return MdpSpec((p_axis, v_axis), actions, rewards, nxt, probs, combine="worst",
                   meta={"system": "mountaincar", "robust_w": w})


@dataclass(frozen=True)
class VcasRewards:
    """Penalty magnitudes (all >= 0); the MDP uses their negatives as rewards."""

    nmac: float = 1.0
    alert: float = 0.01
    reversal: float = 0.02
    strengthen: float = 0.01
    weak_to_strong: float = 0.02

    def __post_init__(self):
        for name in ("nmac", "alert", "reversal", "strengthen", "weak_to_strong"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"penalty {name} must be a finite number >= 0, got {v}")


def vcas_action_costs(params: VcasRewards) -> np.ndarray:
    """``cost[prev, new]`` (negative reward) for issuing ``new`` after ``prev``."""
    cost = np.zeros((dyn.N_ADV, dyn.N_ADV))
    for prev in dyn.Advisory:
        for new in dyn.Advisory:
            c = 0.0
            if new != dyn.Advisory.COC:
                c += params.alert
            if prev.sense * new.sense < 0:
                c += params.reversal
            if new.strengthened and new.strength > prev.strength:
                c += params.strengthen
            if new.strengthened and not prev.strengthened:
                c += params.weak_to_strong
            cost[prev, new] = c
    return cost


def vcas_h_axis(inner_step: float = 25.0, outer_step: float = 200.0, inner: float = 1000.0) -> np.ndarray:
    core = np.arange(-inner, inner + 0.5 * inner_step, inner_step)
    outer = np.arange(inner + outer_step, dyn.H_LIMIT + 0.5 * outer_step, outer_step)
    return np.concatenate([-outer[::-1], core, outer])


def verticalcas_spec(params: VcasRewards | None = None, h_axis=None, hdot_axis=None, tau_max: int = dyn.TAU_MAX,
                     accel_scale: float = 1.0, combine: str = "expect", nmac_buffer: float = 0.0) -> MdpSpec:
    """Staged encounter MDP over (h, hdot0) with the current advisory as a discrete index.

    ``combine="worst"`` scores each advisory by its least favourable
    acceleration sample instead of their average.  ``nmac_buffer`` widens
    the penalised band at tau = 0 to ``|h| < 100 + nmac_buffer`` for
    planning only; the reach checks keep the 100 ft band.
    """
    if nmac_buffer < 0:
        raise ValueError("nmac_buffer must be >= 0")
    params = VcasRewards() if params is None else params
    h_axis = vcas_h_axis() if h_axis is None else np.asarray(h_axis, dtype=float)
    hdot_axis = np.linspace(-dyn.HDOT_LIMIT, dyn.HDOT_LIMIT, 51) if hdot_axis is None else np.asarray(hdot_axis, float)
    pts = grid_points((h_axis, hdot_axis))
    n_grid = pts.shape[0]
    n_adv = dyn.N_ADV
    n = n_grid * n_adv
    state_adv = np.repeat(np.arange(n_adv), n_grid)
    h = np.tile(pts[:, 0], n_adv)
    hd = np.tile(pts[:, 1], n_adv)
    a_lo, a_hi = dyn.vcas_accel_bounds(state_adv, hd, accel_scale)
    accels = np.stack([a_lo, 0.5 * (a_lo + a_hi), a_hi], axis=1)
    succ = np.empty((n, 3, 2))
    for j in range(3):
        h2, hd2 = dyn.vcas_step_arrays(h, hd, state_adv, accels[:, j])
        succ[:, j, 0], succ[:, j, 1] = h2, hd2
    # geometry does not depend on the issued advisory
    nxt = np.broadcast_to(succ[:, None], (n, n_adv, 3, 2))
    probs = np.full((n, n_adv, 3), 1.0 / 3.0)
    cost = vcas_action_costs(params)
    rewards = -cost[state_adv]
    nmac = np.where(np.abs(h) < dyn.NMAC_H + nmac_buffer, -params.nmac, 0.0)
    terminal = rewards + nmac[:, None]
    next_disc = np.broadcast_to(np.arange(n_adv), (n, n_adv))
    return MdpSpec((h_axis, hdot_axis), tuple(a.name for a in dyn.Advisory), rewards, nxt, probs,
                   discrete=(("s_adv", n_adv),), next_discrete=np.ascontiguousarray(next_disc), stages=tau_max,
                   terminal_rewards=terminal, combine=combine,
                   meta={"system": "verticalcas", "accel_scale": accel_scale, "nmac_buffer": nmac_buffer})


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiplicative factor applied every ``decay_every`` epochs
    decay_every: int = 100
    lam: float = 4.0
    seed: int = 0
    optimizer: str = "adamax"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam <= 0 or self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lam, lr and lr_decay must be > 0")
        if self.optimizer not in ("adamax", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class TrainResult:
    network: Network
    accuracy: float
    mae: float
    losses: tuple


def loss_weights(pred: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    """Per-entry weight: ``lam`` when the optimal action is under-valued or a
    suboptimal one over-valued, 1 otherwise."""
    best = np.zeros_like(target, dtype=bool)
    best[np.arange(target.shape[0]), np.argmax(target, axis=1)] = True
    err = pred - target
    bad = (best & (err < 0)) | (~best & (err > 0))
    return np.where(bad, lam, 1.0)


def asymmetric_loss(pred, target, lam: float) -> float:
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    return float(np.mean(loss_weights(pred, target, lam) * (pred - target) ** 2))


def _forward(ws, bs, x):
    acts = [x]
    pre = []
    h = x
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = h @ w.T + b
        pre.append(z)
        h = z if k == len(ws) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def loss_and_grads(ws, bs, x, target, lam: float):
    """Asymmetric loss and its gradient with respect to every weight and bias."""
    pre, acts = _forward(ws, bs, x)
    pred = acts[-1]
    wgt = loss_weights(pred, target, lam)
    err = pred - target
    loss = float(np.mean(wgt * err ** 2))
    delta = 2.0 * wgt * err / err.size
    gw, gb = [None] * len(ws), [None] * len(ws)
    for k in range(len(ws) - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ ws[k]) * (pre[k - 1] > 0)
    return loss, gw, gb


def train_network(table: QTable, arch, cfg: TrainConfig = TrainConfig(), discrete_index: int = 0,
                  stage: int | None = None, log=None) -> TrainResult:
    """Fit a ReLU network to the Q-values of one (discrete, stage) slice of ``table``.

    Inputs and targets are standardised during training and the scaling is
    folded back into the first and last layers afterwards, so the returned
    network takes raw state units.
    """
    arch = [int(a) for a in arch]
    x = grid_points(table.axes)
    vals = table.stage(stage)
    y = vals[discrete_index * table.n_grid:(discrete_index + 1) * table.n_grid]
    if arch[0] != x.shape[1] or arch[-1] != y.shape[1]:
        raise ValueError(f"architecture {arch} does not match {x.shape[1]} inputs / {y.shape[1]} actions")
    rng = np.random.default_rng(cfg.seed)
    x_mu, x_sd = x.mean(axis=0), x.std(axis=0)
    x_sd = np.where(x_sd > 0, x_sd, 1.0)
    y_mu, y_sd = float(y.mean()), float(y.std()) or 1.0
    xn = (x - x_mu) / x_sd
    yn = (y - y_mu) / y_sd
    ws, bs = [], []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    params = ws + bs
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    losses = []
    lr = cfg.lr
    n = xn.shape[0]
    for epoch in range(cfg.epochs):
        if epoch and epoch % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, gw, gb = loss_and_grads(ws, bs, xn[idx], yn[idx], cfg.lam)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch} (loss {loss})")
            total += loss * idx.size
            step += 1
            for i, g in enumerate(gw + gb):
                p = params[i]
                if cfg.optimizer == "adamax":
                    m1[i] = cfg.beta1 * m1[i] + (1 - cfg.beta1) * g
                    m2[i] = np.maximum(cfg.beta2 * m2[i], np.abs(g))
                    p -= (lr / (1 - cfg.beta1 ** step)) * m1[i] / (m2[i] + 1e-12)
                else:
                    m1[i] = cfg.momentum * m1[i] + g
                    p -= lr * m1[i]
        losses.append(total / n)
        if not np.isfinite(losses[-1]):
            raise TrainingError(f"training diverged at epoch {epoch}")
        if log is not None and (epoch % 100 == 0 or epoch == cfg.epochs - 1):
            log(f"epoch {epoch}: loss {losses[-1]:.6g}")
    # fold the standardisation into the outer layers
    ws = [w.copy() for w in ws]
    bs = [b.copy() for b in bs]
    bs[0] = bs[0] - ws[0] @ (x_mu / x_sd)
    ws[0] = ws[0] / x_sd
    ws[-1] = ws[-1] * y_sd
    bs[-1] = bs[-1] * y_sd + y_mu
    net = Network(tuple(ws), tuple(bs))
    pred = evaluate(net, x)
    acc = policy_accuracy(pred, y)
    mae = float(np.mean(np.abs(pred - y)))
    return TrainResult(net, acc, mae, tuple(losses))


def policy_accuracy(pred, target) -> float:
    return float(np.mean(argmax_actions(pred) == argmax_actions(target)))

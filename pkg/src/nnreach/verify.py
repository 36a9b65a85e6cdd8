"""Per-cell action sets of a discrete-action controller.

``action_set_verified`` is a sound over-approximation: an action is dropped
only after proving, with affine (symbolic interval) bounds on pairwise score
differences, that some other action strictly beats it everywhere in the
cell.  ``action_set_sampling`` is the cheap under-approximating baseline and
is *not* sound.

Action sets are plain ``int`` bitmasks (bit ``a`` set when action ``a`` may be
chosen).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, TextIO

import numpy as np

from .network import Network, argmax_actions, evaluate
from .parallel import chunked, pmap
from .statespace import Grid, HyperRect

DEFAULT_BUDGET = 12
DECISION_TOL = 1e-9


def mask_of(actions) -> int:
    m = 0
    for a in actions:
        m |= 1 << int(a)
    return m


def actions_of(mask: int) -> list[int]:
    out, a = [], 0
    mask = int(mask)
    while mask:
        if mask & 1:
            out.append(a)
        mask >>= 1
        a += 1
    return out


def popcount(masks) -> np.ndarray:
    m = np.asarray(masks, dtype=np.int64)
    count = np.zeros(m.shape, dtype=np.int64)
    while np.any(m):
        count += m & 1
        m = m >> 1
    return count


@dataclass(frozen=True, eq=False)
class OutputBounds:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, y, slack: float = 0.0) -> bool:
        y = np.atleast_2d(y)
        return bool(np.all(y >= self.lo - slack) and np.all(y <= self.hi + slack))


@dataclass(frozen=True, eq=False)
class SymbolicBounds:
    """Affine envelopes ``lower_coef @ x + lower_const <= f(x) <= upper_coef @ x + upper_const`` on ``rect``."""

    lower_coef: np.ndarray
    lower_const: np.ndarray
    upper_coef: np.ndarray
    upper_const: np.ndarray
    rect: HyperRect

    def lower(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.lower_coef.T + self.lower_const

    def upper(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.upper_coef.T + self.upper_const

    def concretize(self) -> OutputBounds:
        lo, hi = self.rect.lo_array, self.rect.hi_array
        lo_b = _form_min(self.lower_coef[None], self.lower_const[None], lo[None], hi[None])[0]
        hi_b = _form_max(self.upper_coef[None], self.upper_const[None], lo[None], hi[None])[0]
        return OutputBounds(lo_b, hi_b)


def _check_box(net: Network, rect: HyperRect):
    if rect.dim != net.n_inputs:
        raise ValueError(f"rect has dimension {rect.dim}, network expects {net.n_inputs} inputs")


def _form_max(c, k, lo, hi):
    # c: (B, n, d), k: (B, n), lo/hi: (B, d)
    return k + np.einsum("bnd,bd->bn", np.maximum(c, 0.0), hi) + np.einsum("bnd,bd->bn", np.minimum(c, 0.0), lo)


def _form_min(c, k, lo, hi):
    return k + np.einsum("bnd,bd->bn", np.maximum(c, 0.0), lo) + np.einsum("bnd,bd->bn", np.minimum(c, 0.0), hi)


def interval_batch(net: Network, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Naive interval arithmetic through every layer for a batch of boxes."""
    l, u = np.atleast_2d(lo).astype(float), np.atleast_2d(hi).astype(float)
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        l, u = l @ wp.T + u @ wn.T + b, u @ wp.T + l @ wn.T + b
        if k < last:
            l, u = np.maximum(l, 0.0), np.maximum(u, 0.0)
    return l, u


def _hidden_forms(net: Network, lo: np.ndarray, hi: np.ndarray):
    """Symbolic envelopes of the last hidden layer (post-ReLU) over each box."""
    bsz, d = lo.shape
    up_c = np.broadcast_to(np.eye(d), (bsz, d, d)).copy()
    up_k = np.zeros((bsz, d))
    lo_c, lo_k = up_c.copy(), up_k.copy()
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        up_c, lo_c = (np.einsum("nm,bmd->bnd", wp, up_c) + np.einsum("nm,bmd->bnd", wn, lo_c),
                      np.einsum("nm,bmd->bnd", wp, lo_c) + np.einsum("nm,bmd->bnd", wn, up_c))
        up_k, lo_k = up_k @ wp.T + lo_k @ wn.T + b, lo_k @ wp.T + up_k @ wn.T + b
        u_lo = _form_min(up_c, up_k, lo, hi)
        u_hi = _form_max(up_c, up_k, lo, hi)
        l_lo = _form_min(lo_c, lo_k, lo, hi)
        # upper envelope: 0 if never positive, identity if never negative, chord otherwise
        dead = u_hi <= 0.0
        cross = (u_lo < 0.0) & ~dead
        lam = np.where(cross, u_hi / np.where(cross, u_hi - u_lo, 1.0), 1.0)
        lam = np.where(dead, 0.0, lam)
        up_k = np.where(cross, lam * (up_k - u_lo), lam * up_k)
        up_c = up_c * lam[..., None]
        # lower envelope: keep only where provably non-negative, else the constant 0
        keep = l_lo >= 0.0
        lo_c = lo_c * keep[..., None]
        lo_k = lo_k * keep
    return up_c, up_k, lo_c, lo_k


def _final_forms(net: Network, lo, hi, matrix=None, offset=None):
    up_c, up_k, lo_c, lo_k = _hidden_forms(net, lo, hi)
    w = net.weights[-1] if matrix is None else matrix
    b = net.biases[-1] if offset is None else offset
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    fu_c = np.einsum("nm,bmd->bnd", wp, up_c) + np.einsum("nm,bmd->bnd", wn, lo_c)
    fl_c = np.einsum("nm,bmd->bnd", wp, lo_c) + np.einsum("nm,bmd->bnd", wn, up_c)
    fu_k = up_k @ wp.T + lo_k @ wn.T + b
    fl_k = lo_k @ wp.T + up_k @ wn.T + b
    return fl_c, fl_k, fu_c, fu_k


def interval_bounds(net: Network, rect: HyperRect) -> OutputBounds:
    _check_box(net, rect)
    l, u = interval_batch(net, rect.lo_array[None], rect.hi_array[None])
    return OutputBounds(l[0], u[0])


def symbolic_bounds(net: Network, rect: HyperRect) -> SymbolicBounds:
    _check_box(net, rect)
    fl_c, fl_k, fu_c, fu_k = _final_forms(net, rect.lo_array[None], rect.hi_array[None])
    return SymbolicBounds(fl_c[0], fl_k[0], fu_c[0], fu_k[0], rect)


def symbolic_concrete_batch(net: Network, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    fl_c, fl_k, fu_c, fu_k = _final_forms(net, lo, hi)
    return _form_min(fl_c, fl_k, lo, hi), _form_max(fu_c, fu_k, lo, hi)


@functools.lru_cache(maxsize=32)
def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.nonzero(~np.eye(n, dtype=bool))
    return a, b


def _beaten(net: Network, lo, hi, method: str, tol: float) -> np.ndarray:
    """``out[i, a]`` is True when some other action provably beats ``a`` on box ``i``."""
    n = net.n_outputs
    a, b = _pairs(n)
    if method == "interval":
        l, u = interval_batch(net, lo, hi)
        diff_hi = u[:, a] - l[:, b]
    else:
        w, c = net.weights[-1], net.biases[-1]
        _, _, fu_c, fu_k = _final_forms(net, lo, hi, w[a] - w[b], c[a] - c[b])
        diff_hi = _form_max(fu_c, fu_k, lo, hi)
    out = np.zeros((lo.shape[0], n), dtype=bool)
    proven = diff_hi < -tol
    for col in range(a.size):
        out[:, a[col]] |= proven[:, col]
    return out


def verified_masks(net: Network, lo, hi, budget: int = DEFAULT_BUDGET, scale=None, method: str = "symbolic",
                   tol: float = DECISION_TOL) -> np.ndarray:
    """Sound action-set masks for a batch of boxes.

    Each (box, action) pair gets at most ``budget`` bisections; a pair that is
    still undecided when the budget runs out keeps the action.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    nbox, d = lo.shape
    if d != net.n_inputs:
        raise ValueError(f"boxes have dimension {d}, network expects {net.n_inputs} inputs")
    n = net.n_outputs
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    included = np.zeros((nbox, n), dtype=bool)
    included[np.arange(nbox), argmax_actions(evaluate(net, 0.5 * (lo + hi)))] = True
    cell_idx, act = np.nonzero(~included)
    item_lo, item_hi = lo[cell_idx], hi[cell_idx]
    splits = np.zeros((nbox, n), dtype=np.int64)
    while cell_idx.size:
        live = ~included[cell_idx, act]
        cell_idx, act, item_lo, item_hi = cell_idx[live], act[live], item_lo[live], item_hi[live]
        if not cell_idx.size:
            break
        beaten = _beaten(net, item_lo, item_hi, method, tol)[np.arange(cell_idx.size), act]
        open_ = ~beaten
        if not np.any(open_):
            break
        cell_idx, act, item_lo, item_hi = cell_idx[open_], act[open_], item_lo[open_], item_hi[open_]
        centers = 0.5 * (item_lo + item_hi)
        witness = argmax_actions(evaluate(net, centers)) == act
        included[cell_idx[witness], act[witness]] = True
        width = (item_hi - item_lo) / scale
        flat = ~np.any(width > 0, axis=1)
        included[cell_idx[flat], act[flat]] = True
        keep = ~(witness | flat)
        cell_idx, act, item_lo, item_hi, width = cell_idx[keep], act[keep], item_lo[keep], item_hi[keep], width[keep]
        pair = cell_idx * n + act
        uniq, counts = np.unique(pair, return_counts=True)
        used = splits.ravel()[uniq] + counts
        over = uniq[used > budget]
        splits.ravel()[uniq] = used
        included.ravel()[over] = True
        go = ~np.isin(pair, over)
        cell_idx, act, item_lo, item_hi, width = cell_idx[go], act[go], item_lo[go], item_hi[go], width[go]
        k = np.argmax(width, axis=1)
        rows = np.arange(cell_idx.size)
        mid = 0.5 * (item_lo[rows, k] + item_hi[rows, k])
        left_hi = item_hi.copy()
        left_hi[rows, k] = mid
        right_lo = item_lo.copy()
        right_lo[rows, k] = mid
        cell_idx = np.concatenate([cell_idx, cell_idx])
        act = np.concatenate([act, act])
        item_lo = np.concatenate([item_lo, right_lo])
        item_hi = np.concatenate([left_hi, item_hi])
    weights = 1 << np.arange(n, dtype=np.int64)
    return included.astype(np.int64) @ weights


def action_set_verified(net: Network, cell: HyperRect, budget: int = DEFAULT_BUDGET, scale=None,
                        method: str = "symbolic") -> int:
    _check_box(net, cell)
    return int(verified_masks(net, cell.lo_array[None], cell.hi_array[None], budget, scale, method)[0])


def _sample_points(cell_lo, cell_hi, n, rng):
    d = cell_lo.size
    u = rng.random((n, d))
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    t = np.vstack([u, corners])
    return cell_lo + t * (cell_hi - cell_lo)


def action_set_sampling(net: Network, cell: HyperRect, n: int = 100, rng=None) -> int:
    """Union of argmax actions over ``n`` uniform samples and the cell corners (not sound)."""
    _check_box(net, cell)
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(rng)
    pts = _sample_points(cell.lo_array, cell.hi_array, n, rng)
    return mask_of(np.unique(argmax_actions(evaluate(net, pts))))


def sampling_masks(net: Network, lo, hi, ids, n: int, seed: int) -> np.ndarray:
    out = np.zeros(len(ids), dtype=np.int64)
    for i, cid in enumerate(ids):
        rng = np.random.default_rng([int(seed), int(cid)])
        pts = _sample_points(lo[i], hi[i], n, rng)
        out[i] = mask_of(np.unique(argmax_actions(evaluate(net, pts))))
    return out


def _approx_chunk(args):
    net, lo, hi, ids, method, budget, samples, seed, scale = args
    if method == "sampling":
        return sampling_masks(net, lo, hi, ids, samples, seed)
    return verified_masks(net, lo, hi, budget, scale, method)


def approximate_controller(net, grid: Grid, method: str = "symbolic", budget: int = DEFAULT_BUDGET,
                           samples: int = 100, seed: int = 0, workers: int = 1, chunk: int = 4096,
                           fixed_inputs=()) -> dict:
    """Action-set mask for every cell of ``grid``; keys are cell ids.

    ``net`` may also map a discrete index (for example the current advisory)
    to its own network; the keys are then ``(cell_id, index)`` pairs.
    ``fixed_inputs`` are appended to every cell as exact values, which is how
    a scalar such as tau enters a network trained on it.
    """
    if isinstance(net, Mapping):
        out = {}
        for k in sorted(net):
            sub = approximate_controller(net[k], grid, method, budget, samples, seed, workers, chunk, fixed_inputs)
            out.update({(cid, int(k)): m for cid, m in sub.items()})
        return out
    if method not in ("sampling", "interval", "symbolic"):
        raise ValueError(f"unknown approximation method {method!r}")
    fixed = np.asarray(fixed_inputs, dtype=float).reshape(-1)
    if grid.continuous_dims + fixed.size != net.n_inputs:
        raise ValueError("grid dimension does not match the network input size")
    lo, hi, scale = grid.lo, grid.hi, grid.extent
    if fixed.size:
        lo = np.column_stack([lo, np.broadcast_to(fixed, (len(grid), fixed.size))])
        hi = np.column_stack([hi, np.broadcast_to(fixed, (len(grid), fixed.size))])
        scale = np.concatenate([scale, np.maximum(np.abs(fixed), 1.0)])
    masks = approximate_rows(net, lo, hi, grid.ids, method, budget, samples, seed, scale, workers, chunk)
    return {int(i): int(m) for i, m in zip(grid.ids, masks)}


def approximate_rows(net, lo, hi, ids, method, budget, samples, seed, scale, workers=1, chunk=4096) -> np.ndarray:
    n = len(ids)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    parts = chunked(n, -(-n // chunk))  # independent of workers, so results are bit-identical
    jobs = [(net, lo[s], hi[s], ids[s], method, budget, samples, seed, scale) for s in parts]
    try:
        results = pmap(_approx_chunk, jobs, workers)
    except Exception as exc:  # attach the offending range for the caller
        raise RuntimeError(f"action-set approximation failed: {exc}") from exc
    return np.concatenate(results)


def dump_action_sets(action_sets: Mapping[int, int], stream: TextIO, header=()) -> None:
    for line in header:
        stream.write(f"# {line}\n")
    for cid in sorted(action_sets):
        stream.write(f"{cid} actions={','.join(str(a) for a in actions_of(action_sets[cid]))}\n")


def load_action_sets(stream: TextIO) -> dict[int, int]:
    out = {}
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            cid, rest = line.split()
            if not rest.startswith("actions="):
                raise ValueError
            acts = [int(a) for a in rest[8:].split(",") if a]
        except ValueError:
            raise ValueError(f"line {lineno}: expected '<cellid> actions=<a,b,...>'") from None
        out[int(cid)] = mask_of(acts)
    return out

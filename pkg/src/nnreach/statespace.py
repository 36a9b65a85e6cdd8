"""Adaptive hyper-rectangular partitions of a continuous state space.

Cells use two boundary conventions on purpose:

* point location treats a cell as the half-open box ``[lo, hi)`` (the global
  upper face is closed), so every in-bounds point has exactly one owner;
* region queries treat a cell as the closed box ``[lo, hi]``, so touching a
  face counts as intersecting.  Over-approximation never shrinks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

FLOOR_FRACTION = 2.0**-20


class GridError(ValueError):
    pass


class OutOfBoundsError(GridError):
    pass


class RefinementFloorError(GridError):
    pass


class CellNotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class HyperRect:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in np.ravel(self.lo))
        hi = tuple(float(x) for x in np.ravel(self.hi))
        if len(lo) != len(hi):
            raise ValueError(f"lo has {len(lo)} entries but hi has {len(hi)}")
        for i, (a, b) in enumerate(zip(lo, hi)):
            if not a <= b:
                raise ValueError(f"dimension {i}: lo={a!r} exceeds hi={b!r}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_array(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_array(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_array + self.hi_array)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def corners(self) -> np.ndarray:
        """All ``2**dim`` vertices, one per row."""
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def contains(self, point, tol: float = 0.0) -> bool:
        x = np.asarray(point, dtype=float)
        return bool(np.all(x >= self.lo_array - tol) and np.all(x <= self.hi_array + tol))

    def intersects(self, other: "HyperRect") -> bool:
        return bool(np.all(self.lo_array <= other.hi_array) and np.all(other.lo_array <= self.hi_array))


@dataclass(frozen=True, eq=False)
class Polytope:
    """Intersection of half-spaces ``normals @ x <= offsets``.

    Emptiness is allowed; ask `is_empty` rather than assuming feasibility.
    """

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if a.shape[0] != b.shape[0]:
            raise ValueError("one offset per half-space is required")
        if np.any(np.all(a == 0.0, axis=1)):
            raise ValueError("half-space normals must be nonzero")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("half-spaces must be finite")
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)

    @classmethod
    def from_halfspaces(cls, halfspaces: Iterable[tuple[Sequence[float], float]]) -> "Polytope":
        pairs = list(halfspaces)
        return cls(np.array([p[0] for p in pairs], dtype=float), np.array([p[1] for p in pairs], dtype=float))

    @classmethod
    def from_box(cls, rect: HyperRect) -> "Polytope":
        d = rect.dim
        eye = np.eye(d)
        return cls(np.vstack([eye, -eye]), np.concatenate([rect.hi_array, -rect.lo_array]))

    @property
    def dimension(self) -> int:
        return self.normals.shape[1]

    @property
    def halfspaces(self) -> list[tuple[np.ndarray, float]]:
        return [(a.copy(), float(b)) for a, b in zip(self.normals, self.offsets)]

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(x @ self.normals.T <= self.offsets + tol, axis=1)

    def intersect(self, other: "Polytope") -> "Polytope":
        return Polytope(np.vstack([self.normals, other.normals]), np.concatenate([self.offsets, other.offsets]))

    def axis_box(self) -> HyperRect | None:
        """The equivalent box if every normal is axis aligned, else None."""
        d = self.dimension
        lo = np.full(d, -np.inf)
        hi = np.full(d, np.inf)
        for a, b in zip(self.normals, self.offsets):
            nz = np.flatnonzero(a)
            if nz.size != 1:
                return None
            k = nz[0]
            if a[k] > 0:
                hi[k] = min(hi[k], b / a[k])
            else:
                lo[k] = max(lo[k], b / a[k])
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
            return None
        return HyperRect(lo, hi)

    def vertices(self, within: HyperRect, tol: float = 0.0) -> np.ndarray:
        """Vertices of ``self ∩ within`` for dimension <= 2 (empty array if infeasible)."""
        d = self.dimension
        if d != within.dim:
            raise ValueError("dimension mismatch between polytope and box")
        if d == 1:
            lo, hi = within.lo[0], within.hi[0]
            for a, b in zip(self.normals[:, 0], self.offsets):
                if a > 0:
                    hi = min(hi, (b + tol) / a)
                else:
                    lo = max(lo, (b + tol) / a)
            if lo > hi:
                return np.empty((0, 1))
            return np.array([[lo], [hi]])
        if d != 2:
            raise ValueError("vertex enumeration is implemented for dimension <= 2")
        (x0, y0), (x1, y1) = within.lo, within.hi
        poly = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        for a, b in zip(self.normals, self.offsets):
            poly = _clip(poly, a[0], a[1], b + tol)
            if not poly:
                return np.empty((0, 2))
        return np.array(poly, dtype=float)

    def is_empty(self, within: HyperRect, tol: float = 0.0) -> bool:
        box = self.axis_box()
        if box is not None:
            return not box.intersects(within)
        return self.vertices(within, tol).shape[0] == 0


def _clip(poly, ax, ay, b):
    # Sutherland-Hodgman against ax*x + ay*y <= b; degenerate polygons survive.
    out = []
    n = len(poly)
    for i in range(n):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % n]
        fp = ax * px + ay * py - b
        fq = ax * qx + ay * qy - b
        if fp <= 0:
            out.append((px, py))
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


class _BucketIndex:
    """Uniform bucket lattice mapping space to the cells that overlap each bucket."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, blo: np.ndarray, bhi: np.ndarray):
        n, d = lo.shape
        ext = bhi - blo
        widths = hi - lo
        med = np.median(widths, axis=0) if n else ext
        med = np.where(med > 0, med, ext)
        nb = np.clip(np.rint(ext / med), 1, 4096).astype(np.int64)
        cap = max(4 * n, 64)
        while np.prod(nb) > cap and np.any(nb > 1):
            nb = np.maximum(1, (nb + 1) // 2)
        self.d = d
        self.blo = blo
        self.nb = nb
        self.bw = ext / nb
        self.strides = np.cumprod(np.concatenate([[1], nb[::-1][:-1]]))[::-1]
        first, last = self._span(lo, hi)
        rows = np.arange(n)
        flat = np.zeros(n, dtype=np.int64)
        for k in range(d):
            span = last[:, k] - first[:, k] + 1
            reps = np.repeat(np.arange(rows.size), span)
            offs = np.arange(reps.size) - np.repeat(np.cumsum(span) - span, span)
            rows = rows[reps]
            flat = flat[reps] + (first[reps, k] + offs) * self.strides[k]
            first, last = first[reps], last[reps]
        order = np.argsort(flat, kind="stable")
        self.members = rows[order]
        counts = np.bincount(flat, minlength=int(np.prod(nb)))
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self._padded = None

    def _span(self, lo, hi):
        f = np.floor((lo - self.blo) / self.bw - 1e-9).astype(np.int64)
        l = np.floor((hi - self.blo) / self.bw + 1e-9).astype(np.int64)
        return np.clip(f, 0, self.nb - 1), np.clip(l, 0, self.nb - 1)

    def query(self, qlo: np.ndarray, qhi: np.ndarray) -> np.ndarray:
        first, last = self._span(qlo[None, :], qhi[None, :])
        flat = np.zeros(1, dtype=np.int64)
        for k in range(self.d):
            rng = np.arange(first[0, k], last[0, k] + 1) * self.strides[k]
            flat = (flat[:, None] + rng[None, :]).ravel()
        s = self.starts[flat]
        e = self.starts[flat + 1]
        lens = e - s
        total = int(lens.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64)
        idx = np.repeat(s - (np.cumsum(lens) - lens), lens) + np.arange(total)
        return np.unique(self.members[idx])

    def query_many(self, qlo: np.ndarray, qhi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Candidate (query, row) pairs for a batch of boxes; pairs are unique."""
        first, last = self._span(qlo, qhi)
        q = np.arange(qlo.shape[0])
        flat = np.zeros(q.size, dtype=np.int64)
        for k in range(self.d):
            span = last[:, k] - first[:, k] + 1
            reps = np.repeat(np.arange(q.size), span)
            offs = np.arange(reps.size) - np.repeat(np.cumsum(span) - span, span)
            q = q[reps]
            flat = flat[reps] + (first[reps, k] + offs) * self.strides[k]
            first, last = first[reps], last[reps]
        s = self.starts[flat]
        lens = self.starts[flat + 1] - s
        total = int(lens.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        idx = np.repeat(s - (np.cumsum(lens) - lens), lens) + np.arange(total)
        qq = np.repeat(q, lens)
        rows = self.members[idx]
        n_rows = int(self.members.max()) + 1
        key = np.unique(qq * n_rows + rows)
        return key // n_rows, key % n_rows

    def buckets_of(self, pts: np.ndarray) -> np.ndarray:
        b = np.floor((pts - self.blo) / self.bw).astype(np.int64)
        b = np.clip(b, 0, self.nb - 1)
        return b @ self.strides

    def padded(self, kcap: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Fixed-width candidate table plus a mask of buckets that overflow it."""
        if self._padded is None:
            counts = np.diff(self.starts)
            kmax = min(max(int(counts.max()) if counts.size else 1, 1), kcap)
            table = np.full((counts.size, kmax), -1, dtype=np.int64)
            pos = np.arange(self.members.size) - np.repeat(self.starts[:-1], counts)
            keep = pos < kmax
            table[np.repeat(np.arange(counts.size), counts)[keep], pos[keep]] = self.members[keep]
            self._padded = (table, counts > kmax)
        return self._padded


class Grid:
    """An immutable partition of ``bounds`` into boxes with stable integer ids.

    ``discrete_dims`` names categorical axes (for example an advisory index)
    that are never refined; they select among copies of the continuous grid.
    """

    def __init__(self, bounds: HyperRect, ids, lo, hi, discrete_dims: Sequence[tuple[str, int]] = (),
                 next_id: int | None = None):
        ids = np.asarray(ids, dtype=np.int64)
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.shape[0] != ids.size or lo.shape[1] != bounds.dim:
            raise ValueError("cell arrays do not match the bounds dimension")
        if np.unique(ids).size != ids.size:
            raise ValueError("cell ids must be unique")
        blo, bhi = bounds.lo_array, bounds.hi_array
        if np.any(lo > hi) or np.any(lo < blo) or np.any(hi > bhi):
            raise ValueError("every cell must be a valid box inside the grid bounds")
        self.bounds = bounds
        self.ids = ids
        self.lo = lo
        self.hi = hi
        self.discrete_dims = tuple((str(n), int(c)) for n, c in discrete_dims)
        floor_id = int(ids.max()) + 1 if ids.size else 0
        self.next_id = max(floor_id, int(next_id)) if next_id is not None else floor_id
        self._row = None
        self._index = None
        for arr in (self.ids, self.lo, self.hi):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.ids.size)

    def __contains__(self, cell_id) -> bool:
        return int(cell_id) in self.row_map

    def __repr__(self) -> str:
        return f"Grid(cells={len(self)}, bounds={self.bounds.lo}..{self.bounds.hi})"

    @property
    def continuous_dims(self) -> int:
        return self.bounds.dim

    @property
    def extent(self) -> np.ndarray:
        return self.bounds.widths

    @property
    def row_map(self) -> dict[int, int]:
        if self._row is None:
            self._row = {int(i): r for r, i in enumerate(self.ids)}
        return self._row

    @property
    def index(self) -> _BucketIndex:
        if self._index is None:
            self._index = _BucketIndex(self.lo, self.hi, self.bounds.lo_array, self.bounds.hi_array)
        return self._index

    def row(self, cell_id: int) -> int:
        try:
            return self.row_map[int(cell_id)]
        except KeyError:
            raise CellNotFoundError(f"no cell with id {cell_id}") from None

    def rows(self, cell_ids) -> np.ndarray:
        return np.array([self.row(i) for i in cell_ids], dtype=np.int64)

    def cell(self, cell_id: int) -> HyperRect:
        r = self.row(cell_id)
        return HyperRect(self.lo[r], self.hi[r])

    def cells(self):
        for r, i in enumerate(self.ids):
            yield int(i), HyperRect(self.lo[r], self.hi[r])

    def volumes(self) -> np.ndarray:
        return np.prod(self.hi - self.lo, axis=1)

    def tol(self) -> float:
        scale = max(1.0, float(np.max(np.abs(np.concatenate([self.bounds.lo_array, self.bounds.hi_array])))))
        return 1e-12 * scale


def grid_from_edges(edges: Sequence[Sequence[float]], discrete_dims: Sequence[tuple[str, int]] = ()) -> Grid:
    """Tensor-product grid from per-dimension sorted edge lists (ids in C order)."""
    edges = [np.asarray(e, dtype=float) for e in edges]
    for k, e in enumerate(edges):
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise ValueError(f"edges for dimension {k} must be strictly increasing with >= 2 entries")
    idx = np.array(list(itertools.product(*[range(e.size - 1) for e in edges])), dtype=np.int64)
    lo = np.column_stack([edges[k][idx[:, k]] for k in range(len(edges))])
    hi = np.column_stack([edges[k][idx[:, k] + 1] for k in range(len(edges))])
    bounds = HyperRect([e[0] for e in edges], [e[-1] for e in edges])
    return Grid(bounds, np.arange(idx.shape[0]), lo, hi, discrete_dims)


def build_uniform_grid(bounds: HyperRect, counts: Sequence[int], discrete_dims: Sequence[tuple[str, int]] = ()) -> Grid:
    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) != bounds.dim:
        raise ValueError("one count per dimension is required")
    if any(c < 1 for c in counts):
        raise ValueError(f"cell counts must be >= 1, got {counts}")
    if np.any(bounds.widths <= 0):
        raise ValueError("bounds must have positive width in every continuous dimension")
    edges = [np.linspace(a, b, c + 1) for a, b, c in zip(bounds.lo, bounds.hi, counts)]
    return grid_from_edges(edges, discrete_dims)


def split_axis(grid: Grid, row: int) -> int:
    """Dimension along which a cell is bisected: widest relative to the grid extent."""
    rel = (grid.hi[row] - grid.lo[row]) / grid.extent
    return int(np.argmax(rel))


def refine_cells(grid: Grid, cell_ids: Iterable[int]) -> tuple[Grid, dict[int, tuple[int, int]]]:
    """Bisect several cells at once; returns the new grid and ``parent -> children``.

    Children get fresh ids in ascending parent-id order, so the result does
    not depend on the iteration order of ``cell_ids``.
    """
    targets = sorted({int(i) for i in cell_ids})
    if not targets:
        return grid, {}
    rows = grid.rows(targets)
    ext = grid.extent
    keep = np.ones(len(grid), dtype=bool)
    keep[rows] = False
    new_lo, new_hi, new_ids = [], [], []
    children = {}
    nid = grid.next_id
    for cid, r in zip(targets, rows):
        k = split_axis(grid, r)
        a, b = grid.lo[r, k], grid.hi[r, k]
        if (b - a) / 2.0 < FLOOR_FRACTION * ext[k]:
            raise RefinementFloorError(f"cell {cid} is already at the minimum width along dimension {k}")
        mid = 0.5 * (a + b)
        lo1, hi1 = grid.lo[r].copy(), grid.hi[r].copy()
        lo2, hi2 = grid.lo[r].copy(), grid.hi[r].copy()
        hi1[k] = mid
        lo2[k] = mid
        new_lo += [lo1, lo2]
        new_hi += [hi1, hi2]
        new_ids += [nid, nid + 1]
        children[cid] = (nid, nid + 1)
        nid += 2
    lo = np.vstack([grid.lo[keep], np.array(new_lo)])
    hi = np.vstack([grid.hi[keep], np.array(new_hi)])
    ids = np.concatenate([grid.ids[keep], np.array(new_ids, dtype=np.int64)])
    return Grid(grid.bounds, ids, lo, hi, grid.discrete_dims, next_id=nid), children


def refine_cell(grid: Grid, cell_id: int) -> Grid:
    return refine_cells(grid, [cell_id])[0]


def locate_many(grid: Grid, points) -> np.ndarray:
    """Vectorised `locate`; returns cell ids (raises if any point is outside)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    blo, bhi = grid.bounds.lo_array, grid.bounds.hi_array
    bad = np.any((pts < blo) | (pts > bhi) | ~np.isfinite(pts), axis=1)
    if np.any(bad):
        raise OutOfBoundsError(f"point {pts[np.argmax(bad)].tolist()} lies outside the grid bounds")
    index = grid.index
    table, overflow = index.padded()
    buckets = index.buckets_of(pts)
    out = np.empty(pts.shape[0], dtype=np.int64)
    plain = np.flatnonzero(~overflow[buckets])
    chunk = max(1, 2_000_000 // table.shape[1])
    for s in range(0, plain.size, chunk):
        sel = plain[s:s + chunk]
        out[sel] = _owner(grid, pts[sel], table[buckets[sel]], bhi)
    crowded = np.flatnonzero(overflow[buckets])
    for b in np.unique(buckets[crowded]):
        sel = crowded[buckets[crowded] == b]
        members = index.members[index.starts[b]:index.starts[b + 1]]
        out[sel] = _owner(grid, pts[sel], np.broadcast_to(members, (sel.size, members.size)), bhi)
    return out


def _owner(grid: Grid, p: np.ndarray, cand: np.ndarray, bhi: np.ndarray) -> np.ndarray:
    valid = cand >= 0
    c = np.where(valid, cand, 0)
    clo = grid.lo[c]
    chi = grid.hi[c]
    pp = p[:, None, :]
    inside = (pp >= clo) & ((pp < chi) | ((pp == chi) & (chi == bhi)))
    hit = valid & np.all(inside, axis=2)
    found = hit.any(axis=1)
    if not np.all(found):
        raise GridError(f"no cell owns point {p[np.argmin(found)].tolist()}; the grid does not tile its bounds")
    return grid.ids[c[np.arange(p.shape[0]), np.argmax(hit, axis=1)]]


def locate(grid: Grid, point) -> int:
    pt = np.asarray(point, dtype=float).reshape(1, -1)
    if pt.shape[1] != grid.continuous_dims:
        raise ValueError("point dimension does not match the grid")
    return int(locate_many(grid, pt)[0])


def rows_intersecting_box(grid: Grid, lo, hi, tol: float | None = None) -> np.ndarray:
    tol = grid.tol() if tol is None else tol
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    cand = grid.index.query(lo - tol, hi + tol)
    ok = np.all((grid.lo[cand] <= hi + tol) & (grid.hi[cand] >= lo - tol), axis=1)
    return cand[ok]


def rows_intersecting(grid: Grid, region: Polytope, tol: float | None = None) -> np.ndarray:
    """Grid rows whose closed box meets the closed region (exact up to ``tol`` for d <= 2)."""
    if region.dimension != grid.continuous_dims:
        raise ValueError(f"region has dimension {region.dimension}, grid has {grid.continuous_dims}")
    tol = grid.tol() if tol is None else tol
    box = region.axis_box()
    if box is not None:
        if not box.intersects(_inflate(grid.bounds, tol)):
            return np.empty(0, dtype=np.int64)
        return rows_intersecting_box(grid, box.lo_array, box.hi_array, tol)
    if region.dimension <= 2:
        verts = region.vertices(grid.bounds, tol)
        if verts.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        cand = rows_intersecting_box(grid, verts.min(axis=0), verts.max(axis=0), tol)
    else:
        # no vertex enumeration above 2-D: half-space tests alone are conservative
        cand = np.arange(len(grid))
    if cand.size == 0:
        return cand
    a = region.normals
    lo = grid.lo[cand]
    hi = grid.hi[cand]
    # smallest value of a.x over each box; separating axis test on every face normal
    mins = lo @ np.maximum(a, 0.0).T + hi @ np.minimum(a, 0.0).T
    ok = np.all(mins <= region.offsets + tol, axis=1)
    return cand[ok]


def pairs_intersecting(grid: Grid, qlo, qhi, normals=None, offsets=None, tol: float | None = None):
    """Batched closed-box intersection: (query, row) pairs whose boxes meet.

    ``qlo``/``qhi`` bound each query region.  When ``normals`` (m x d, shared)
    and per-query ``offsets`` (K x m) are given, each query is the polytope
    ``normals @ x <= offsets`` inside its bounding box and rows are further
    filtered by the half-space test; in 2-D with the exact vertex bounding box
    this is an exact convex intersection test.
    """
    tol = grid.tol() if tol is None else tol
    qlo = np.atleast_2d(np.asarray(qlo, dtype=float))
    qhi = np.atleast_2d(np.asarray(qhi, dtype=float))
    if qlo.shape[0] == 0 or len(grid) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    index = grid.index
    # bound the candidate-pair arrays by processing queries in slices
    first, last = index._span(qlo - tol, qhi + tol)
    load = np.prod(last - first + 1, axis=1) * max(1.0, index.members.size / max(1, index.starts.size - 1))
    bounds = np.searchsorted(np.cumsum(load), np.arange(1, int(load.sum() // 2_000_000) + 2) * 2_000_000)
    edges = np.unique(np.concatenate([[0], np.minimum(bounds + 1, qlo.shape[0]), [qlo.shape[0]]]))
    out_q, out_r = [], []
    b = None if offsets is None else np.atleast_2d(np.asarray(offsets, dtype=float))
    for s, e in zip(edges[:-1], edges[1:]):
        qi, rows = index.query_many(qlo[s:e] - tol, qhi[s:e] + tol)
        qi = qi + s
        ok = np.all((grid.lo[rows] <= qhi[qi] + tol) & (grid.hi[rows] >= qlo[qi] - tol), axis=1)
        qi, rows = qi[ok], rows[ok]
        if normals is not None and qi.size:
            a = np.asarray(normals, dtype=float)
            keep = np.ones(qi.size, dtype=bool)
            for j in range(a.shape[0]):
                ap, an = np.maximum(a[j], 0.0), np.minimum(a[j], 0.0)
                mins = grid.lo[rows] @ ap + grid.hi[rows] @ an
                keep &= mins <= b[qi, j] + tol
            qi, rows = qi[keep], rows[keep]
        out_q.append(qi)
        out_r.append(rows)
    return np.concatenate(out_q), np.concatenate(out_r)


def _inflate(rect: HyperRect, tol: float) -> HyperRect:
    return HyperRect(rect.lo_array - tol, rect.hi_array + tol)


def cells_intersecting(grid: Grid, region: Polytope) -> set[int]:
    return {int(i) for i in grid.ids[rows_intersecting(grid, region)]}


def dump_grid(grid: Grid, stream: TextIO, header: Sequence[str] = ()) -> None:
    for line in header:
        stream.write(f"# {line}\n")
    stream.write(f"dims={grid.continuous_dims}\n")
    stream.write("bounds=" + ",".join(map(repr, grid.bounds.lo)) + "/" + ",".join(map(repr, grid.bounds.hi)) + "\n")
    if grid.discrete_dims:
        stream.write("discrete=" + ",".join(f"{n}:{c}" for n, c in grid.discrete_dims) + "\n")
    stream.write(f"next_id={grid.next_id}\n")
    order = np.argsort(grid.ids, kind="stable")
    for r in order:
        vals = " ".join(repr(float(x)) for x in np.concatenate([grid.lo[r], grid.hi[r]]))
        stream.write(f"{int(grid.ids[r])} {vals}\n")


def load_grid(stream: TextIO) -> Grid:
    dims = bounds = None
    discrete: list[tuple[str, int]] = []
    next_id = None
    ids, lo, hi = [], [], []
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("dims="):
                dims = int(line[5:])
            elif line.startswith("bounds="):
                a, b = line[7:].split("/")
                bounds = HyperRect([float(x) for x in a.split(",")], [float(x) for x in b.split(",")])
            elif line.startswith("discrete="):
                for item in filter(None, line[9:].split(",")):
                    name, card = item.split(":")
                    discrete.append((name, int(card)))
            elif line.startswith("next_id="):
                next_id = int(line[8:])
            else:
                parts = line.split()
                if dims is None or len(parts) != 1 + 2 * dims:
                    raise GridError("cell line has the wrong number of fields")
                ids.append(int(parts[0]))
                vals = [float(x) for x in parts[1:]]
                lo.append(vals[:dims])
                hi.append(vals[dims:])
        except (ValueError, GridError) as exc:
            raise GridError(f"line {lineno}: {exc}") from None
    if dims is None or bounds is None:
        raise GridError("missing dims= or bounds= header")
    lo_a = np.array(lo, dtype=float).reshape(-1, dims)
    hi_a = np.array(hi, dtype=float).reshape(-1, dims)
    return Grid(bounds, ids, lo_a, hi_a, discrete, next_id=next_id)

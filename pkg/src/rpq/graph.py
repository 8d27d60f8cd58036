"""Proximity graph: Vamana-style construction, beam search and recall."""

from __future__ import annotations

import os
import struct
from bisect import insort
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .dataset import VectorDataset

__all__ = [
    "ProximityGraph",
    "SearchResult",
    "build_graph",
    "medoid",
    "beam_search",
    "exact_distance",
    "recall_at_k",
    "reachable_from",
    "save_graph",
    "load_graph",
]


@dataclass
class ProximityGraph:
    """Adjacency lists padded into an (n, max_degree) int32 matrix (-1 = empty)."""

    neighbors: np.ndarray
    degrees: np.ndarray
    max_degree: int
    entry: int

    @property
    def n(self) -> int:
        return int(self.neighbors.shape[0])

    def neighbors_of(self, v: int) -> np.ndarray:
        return self.neighbors[v, : self.degrees[v]]

    def adjacency(self) -> list[np.ndarray]:
        return [self.neighbors_of(v) for v in range(self.n)]

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]], entry: int = 0, max_degree: int | None = None) -> "ProximityGraph":
        n = len(lists)
        width = max([len(a) for a in lists] + [0])
        max_degree = width if max_degree is None else max_degree
        if width > max_degree:
            raise ValueError("a vertex exceeds the maximum degree")
        nbrs = np.full((n, max(max_degree, 1) if n else 0), -1, dtype=np.int32)
        degs = np.zeros(n, dtype=np.int32)
        for v, adj in enumerate(lists):
            adj = sorted(set(int(u) for u in adj))
            if any(u == v or u < 0 or u >= n for u in adj):
                raise ValueError(f"invalid neighbor list for vertex {v}")
            nbrs[v, : len(adj)] = adj
            degs[v] = len(adj)
        return cls(nbrs, degs, int(max_degree), int(entry))


@dataclass
class SearchResult:
    ids: np.ndarray
    distances: np.ndarray
    hops: int
    distance_evals: int
    pool: list = field(default_factory=list, repr=False)


def exact_distance(data: np.ndarray, query: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Distance callback computing exact squared distances to ``query``."""
    data = data.data if isinstance(data, VectorDataset) else data
    q = np.asarray(query, dtype=np.float64)

    def dist(ids: np.ndarray) -> np.ndarray:
        diff = data[ids].astype(np.float64) - q
        return np.einsum("ij,ij->i", diff, diff)

    return dist


def beam_search(
    g: ProximityGraph,
    distance: Callable[[np.ndarray], np.ndarray],
    h: int,
    k: int,
    *,
    neighbors: Callable[[int], np.ndarray] | None = None,
    on_step: Callable[[list], None] | None = None,
    entry: int | None = None,
) -> SearchResult:
    """Best-first routing with a global candidate pool of at most ``h`` vertices.

    ``distance`` maps an array of vertex ids to their distances to the query.
    Each step expands the closest unexpanded candidate, inserts its unseen
    neighbors, and truncates the pool to ``h``; the search stops once every
    pool member is expanded. Ties are ordered by vertex id. ``on_step``
    receives the ranked pool after every expansion.
    """
    if not h >= k >= 1:
        raise ValueError("need h >= k >= 1")
    if g.n == 0:
        return SearchResult(np.zeros(0, dtype=np.int64), np.zeros(0), 0, 0)
    get_neighbors = neighbors if neighbors is not None else g.neighbors_of
    start = g.entry if entry is None else entry
    pool = [(float(distance(np.array([start]))[0]), start)]
    seen = {start}
    expanded = set()
    hops = 0
    evals = 1
    while True:
        nxt = next((item for item in pool if item[1] not in expanded), None)
        if nxt is None:
            break
        v = nxt[1]
        expanded.add(v)
        hops += 1
        fresh = [int(u) for u in get_neighbors(v) if u not in seen]
        if fresh:
            seen.update(fresh)
            ids = np.array(fresh, dtype=np.int64)
            dists = distance(ids)
            evals += len(fresh)
            for d, u in zip(dists.tolist(), fresh):
                item = (d, u)
                if len(pool) >= h and item >= pool[-1]:
                    continue
                insort(pool, item)
                if len(pool) > h:
                    pool.pop()
        if on_step is not None:
            on_step(list(pool))
    top = pool[:k]
    return SearchResult(
        np.array([u for _, u in top], dtype=np.int64),
        np.array([d for d, _ in top]),
        hops,
        evals,
        pool,
    )


def recall_at_k(found, truth) -> float:
    truth = list(truth)
    if not truth:
        raise ValueError("ground truth list is empty")
    k = len(truth)
    return len(set(list(found)[:k]) & set(truth)) / k


def reachable_from(g: ProximityGraph, start: int | None = None) -> np.ndarray:
    """Boolean mask of vertices reachable from ``start`` (default: entry)."""
    mask = np.zeros(g.n, dtype=bool)
    if g.n == 0:
        return mask
    start = g.entry if start is None else start
    mask[start] = True
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for u in g.neighbors_of(v):
            if not mask[u]:
                mask[u] = True
                queue.append(u)
    return mask


# ---------------------------------------------------------------------------
# Construction


def medoid(data: np.ndarray, sample: int = 1000, seed: int = 0) -> int:
    """Vertex minimising the summed squared distance to a random sample."""
    n = len(data)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=min(sample, n), replace=False))
    x = data.astype(np.float64)
    s = x[idx]
    # sum_j |x_i - s_j|^2 = m|x_i|^2 - 2 x_i . sum_j s_j + sum_j |s_j|^2
    x_sq = np.einsum("ij,ij->i", x, x)
    total = len(idx) * x_sq - 2.0 * x @ s.sum(axis=0) + np.einsum("ij,ij->", s, s)
    return int(np.argmin(total))


@numba.njit(cache=True)
def _sq(data, i, j):
    acc = 0.0
    for t in range(data.shape[1]):
        diff = np.float64(data[i, t]) - np.float64(data[j, t])
        acc += diff * diff
    return acc


@numba.njit(cache=True)
def _greedy(data, nbrs, degs, entry, p, beam, seen, stamp, pool_id, pool_d, pool_done, out_ids):
    # Returns number of expanded vertices written to out_ids.
    size = 1
    pool_id[0] = entry
    pool_d[0] = _sq(data, entry, p)
    pool_done[0] = False
    seen[entry] = stamp
    n_out = 0
    while True:
        pos = -1
        for i in range(size):
            if not pool_done[i]:
                pos = i
                break
        if pos < 0:
            break
        pool_done[pos] = True
        v = pool_id[pos]
        out_ids[n_out] = v
        n_out += 1
        for t in range(degs[v]):
            u = nbrs[v, t]
            if seen[u] == stamp:
                continue
            seen[u] = stamp
            d = _sq(data, u, p)
            if size >= beam:
                last_d = pool_d[size - 1]
                last_id = pool_id[size - 1]
                if d > last_d or (d == last_d and u > last_id):
                    continue
            # insertion keeping (distance, id) order
            j = size if size < beam else beam - 1
            while j > 0 and (pool_d[j - 1] > d or (pool_d[j - 1] == d and pool_id[j - 1] > u)):
                pool_d[j] = pool_d[j - 1]
                pool_id[j] = pool_id[j - 1]
                pool_done[j] = pool_done[j - 1]
                j -= 1
            pool_d[j] = d
            pool_id[j] = u
            pool_done[j] = False
            if size < beam:
                size += 1
    return n_out


@numba.njit(cache=True)
def _robust_prune(data, p, cand, n_cand, alpha, max_degree, out):
    # Sort candidates by (distance to p, id); drop p and duplicates.
    ids = np.empty(n_cand, dtype=np.int64)
    ds = np.empty(n_cand, dtype=np.float64)
    m = 0
    for i in range(n_cand):
        c = cand[i]
        if c == p:
            continue
        dup = False
        for j in range(m):
            if ids[j] == c:
                dup = True
                break
        if dup:
            continue
        ids[m] = c
        ds[m] = _sq(data, c, p)
        m += 1
    order = np.argsort(ds[:m], kind="mergesort")
    sid = ids[:m][order]
    sd = ds[:m][order]
    # stable sort by distance keeps insertion order on ties; enforce id order
    i = 0
    while i < m:
        j = i
        while j + 1 < m and sd[j + 1] == sd[i]:
            j += 1
        if j > i:
            sid[i : j + 1] = np.sort(sid[i : j + 1])
        i = j + 1
    alive = np.ones(m, dtype=np.bool_)
    count = 0
    for i in range(m):
        if not alive[i]:
            continue
        star = sid[i]
        out[count] = star
        count += 1
        if count >= max_degree:
            break
        for j in range(i + 1, m):
            if alive[j] and alpha * _sq(data, star, sid[j]) <= sd[j]:
                alive[j] = False
    return count


@numba.njit(cache=True)
def _vamana_pass(data, nbrs, degs, entry, order, alpha, beam, max_degree):
    n = data.shape[0]
    seen = np.zeros(n, dtype=np.int64)
    pool_id = np.empty(beam + 1, dtype=np.int64)
    pool_d = np.empty(beam + 1, dtype=np.float64)
    pool_done = np.empty(beam + 1, dtype=np.bool_)
    visited = np.empty(n, dtype=np.int64)
    cand = np.empty(n + max_degree + 1, dtype=np.int64)
    pruned = np.empty(max_degree, dtype=np.int64)
    stamp = 0
    for p in order:
        stamp += 1
        n_vis = _greedy(data, nbrs, degs, entry, p, beam, seen, stamp, pool_id, pool_d, pool_done, visited)
        n_cand = 0
        for i in range(n_vis):
            cand[n_cand] = visited[i]
            n_cand += 1
        for t in range(degs[p]):
            cand[n_cand] = nbrs[p, t]
            n_cand += 1
        cnt = _robust_prune(data, p, cand, n_cand, alpha, max_degree, pruned)
        for t in range(cnt):
            nbrs[p, t] = pruned[t]
        degs[p] = cnt
        for t in range(cnt):
            j = pruned[t]
            present = False
            for s in range(degs[j]):
                if nbrs[j, s] == p:
                    present = True
                    break
            if present:
                continue
            if degs[j] < max_degree:
                nbrs[j, degs[j]] = p
                degs[j] += 1
            else:
                tmp = np.empty(degs[j] + 1, dtype=np.int64)
                for s in range(degs[j]):
                    tmp[s] = nbrs[j, s]
                tmp[degs[j]] = p
                out = np.empty(max_degree, dtype=np.int64)
                c2 = _robust_prune(data, j, tmp, degs[j] + 1, alpha, max_degree, out)
                for s in range(c2):
                    nbrs[j, s] = out[s]
                degs[j] = c2


def _repair_connectivity(g: ProximityGraph, data: np.ndarray, beam: int) -> None:
    """Link every vertex unreachable from the entry to its nearest reachable vertex."""
    mask = reachable_from(g)
    while not mask.all():
        u = int(np.flatnonzero(~mask)[0])
        reach = np.flatnonzero(mask)
        diff = data[reach].astype(np.float64) - data[u].astype(np.float64)
        order = np.lexsort((reach, np.einsum("ij,ij->i", diff, diff)))
        linked = False
        for v in reach[order]:
            if g.degrees[v] < g.max_degree:
                g.neighbors[v, g.degrees[v]] = u
                g.degrees[v] += 1
                linked = True
                break
        if not linked:
            # Every reachable vertex is full: replace the farthest edge of the nearest one.
            v = int(reach[order[0]])
            adj = g.neighbors_of(v)
            far = np.argmax([_sq(data, v, int(w)) for w in adj])
            g.neighbors[v, far] = u
        mask = reachable_from(g)


def build_graph(
    data,
    max_degree: int = 32,
    build_beam: int = 64,
    alpha_prune: float = 1.2,
    seed: int = 0,
) -> ProximityGraph:
    """Vamana-style build: a pass with alpha=1, then one with ``alpha_prune``.

    The entry vertex is the dataset medoid. Construction is sequential and
    deterministic for a fixed seed.
    """
    data = data.data if isinstance(data, VectorDataset) else np.ascontiguousarray(data, dtype=np.float32)
    n = len(data)
    if n < 1:
        raise ValueError("cannot build a graph over an empty dataset")
    if max_degree < 1 or build_beam < 1 or alpha_prune < 1.0:
        raise ValueError("need max_degree >= 1, build_beam >= 1, alpha_prune >= 1")
    rng = np.random.default_rng(seed)
    entry = medoid(data, seed=seed)
    nbrs = np.full((n, max_degree), -1, dtype=np.int64)
    degs = np.zeros(n, dtype=np.int64)
    init = min(max_degree, n - 1)
    for v in range(n):
        if init == 0:
            break
        pick = rng.choice(n - 1, size=init, replace=False)
        pick[pick >= v] += 1
        nbrs[v, :init] = pick
        degs[v] = init
    for alpha in (1.0, float(alpha_prune)):
        order = rng.permutation(n).astype(np.int64)
        _vamana_pass(data, nbrs, degs, entry, order, alpha, int(build_beam), int(max_degree))
    g = ProximityGraph(nbrs.astype(np.int32), degs.astype(np.int32), int(max_degree), int(entry))
    _repair_connectivity(g, data, build_beam)
    for v in range(n):
        d = g.degrees[v]
        g.neighbors[v, :d] = np.sort(g.neighbors[v, :d])
    return g


# ---------------------------------------------------------------------------
# Persistence: header {n, R_max, entry}, then per vertex {degree, ids...}, all int32.

_GRAPH_HEADER = struct.Struct("<iii")


def save_graph(path: str | os.PathLike, g: ProximityGraph) -> None:
    parts = [_GRAPH_HEADER.pack(g.n, g.max_degree, g.entry)]
    for v in range(g.n):
        row = np.empty(1 + g.degrees[v], dtype="<i4")
        row[0] = g.degrees[v]
        row[1:] = g.neighbors_of(v)
        parts.append(row.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_graph(path: str | os.PathLike) -> ProximityGraph:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _GRAPH_HEADER.size:
        raise ValueError(f"{path}: truncated graph header")
    n, r_max, entry = _GRAPH_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<i4", offset=_GRAPH_HEADER.size)
    nbrs = np.full((n, max(r_max, 1)), -1, dtype=np.int32)
    degs = np.zeros(n, dtype=np.int32)
    pos = 0
    for v in range(n):
        if pos >= body.size:
            raise ValueError(f"{path}: truncated adjacency for vertex {v}")
        d = int(body[pos])
        if d < 0 or d > r_max or pos + 1 + d > body.size:
            raise ValueError(f"{path}: corrupt adjacency record for vertex {v}")
        nbrs[v, :d] = body[pos + 1 : pos + 1 + d]
        degs[v] = d
        pos += 1 + d
    if pos != body.size:
        raise ValueError(f"{path}: trailing bytes after adjacency records")
    return ProximityGraph(nbrs, degs, int(r_max), int(entry))

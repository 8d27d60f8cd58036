"""Deployment modes: PQ-only search in memory, and a hybrid layout that keeps
codes in memory while raw vectors and adjacency live on a simulated disk.

The disk is a pair of files read with ``os.pread``. Every read is counted, and
a configurable per-read latency is accumulated as simulated time (no sleeping),
so I/O cost is reproducible across machines.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import as_array
from .graph import ProximityGraph, SearchResult, beam_search, save_graph
from .pq import adc_distances, code_bytes

__all__ = [
    "IOStats",
    "DiskReadError",
    "HybridStore",
    "write_hybrid_files",
    "search_in_memory",
    "search_hybrid",
    "MemoryBudget",
    "BudgetCheck",
    "check_budget",
    "eq5_diagnostic",
]

VECTOR_FILE = "vectors.raw"
ADJACENCY_FILE = "graph.adj"
_HEADER = struct.Struct("<iii")


class DiskReadError(IOError):
    """A (possibly injected) failed read from the simulated block device."""


@dataclass
class IOStats:
    vector_fetches: int = 0
    adjacency_fetches: int = 0
    bytes_read: int = 0
    simulated_us: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _slot_size(dim: int, block: int) -> int:
    raw = dim * 4
    return -(-raw // block) * block


def write_hybrid_files(directory: str | os.PathLike, data, g: ProximityGraph, block: int = 512) -> None:
    """Lay out raw vectors (headerless float32, one block-aligned slot per
    vertex) and the adjacency file under ``directory``."""
    data = as_array(data)
    if len(data) != g.n:
        raise ValueError("graph and dataset sizes differ")
    os.makedirs(directory, exist_ok=True)
    n, dim = data.shape
    slot = _slot_size(dim, block)
    out = np.zeros((n, slot), dtype=np.uint8)
    out[:, : dim * 4] = np.ascontiguousarray(data, dtype="<f4").view(np.uint8).reshape(n, -1)
    with open(os.path.join(directory, VECTOR_FILE), "wb") as fh:
        fh.write(out.tobytes())
    save_graph(os.path.join(directory, ADJACENCY_FILE), g)


class HybridStore:
    """Read side of the on-disk layout.

    The per-vertex offsets into the adjacency file are computed once when the
    store is opened; afterwards every neighbor list and raw vector costs one
    counted read. ``fail_on`` names vertex ids whose reads raise
    :class:`DiskReadError`, for exercising error paths.
    """

    def __init__(self, directory, dim: int, *, block: int = 512, latency_us: float = 0.0, fail_on=()):
        self.directory = os.fspath(directory)
        self.dim = int(dim)
        self.block = int(block)
        self.slot = _slot_size(self.dim, self.block)
        self.latency_us = float(latency_us)
        self.fail_on = frozenset(int(v) for v in fail_on)
        self._vec_fd = os.open(os.path.join(self.directory, VECTOR_FILE), os.O_RDONLY)
        self._adj_fd = os.open(os.path.join(self.directory, ADJACENCY_FILE), os.O_RDONLY)
        self.n, self.max_degree, self.entry = _HEADER.unpack(os.pread(self._adj_fd, _HEADER.size, 0))
        if os.fstat(self._vec_fd).st_size != self.n * self.slot:
            raise ValueError(f"{self.directory}: vector file does not match n={self.n}, D={self.dim}")
        self._offsets, self._lengths = self._index_adjacency()

    def _index_adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        size = os.fstat(self._adj_fd).st_size
        body = np.frombuffer(os.pread(self._adj_fd, size - _HEADER.size, _HEADER.size), dtype="<i4")
        offsets = np.empty(self.n, dtype=np.int64)
        lengths = np.empty(self.n, dtype=np.int64)
        pos = 0
        for v in range(self.n):
            offsets[v] = _HEADER.size + 4 * pos
            lengths[v] = 4 * (1 + int(body[pos]))
            pos += 1 + int(body[pos])
        return offsets, lengths

    def close(self) -> None:
        for fd in (self._vec_fd, self._adj_fd):
            try:
                os.close(fd)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read(self, fd, size, offset, v, stats: IOStats) -> bytes:
        if v in self.fail_on:
            raise DiskReadError(f"read failure for vertex {v}")
        raw = os.pread(fd, size, offset)
        if len(raw) != size:
            raise DiskReadError(f"short read for vertex {v}: {len(raw)} of {size} bytes")
        stats.bytes_read += size
        stats.simulated_us += self.latency_us
        return raw

    def read_neighbors(self, v: int, stats: IOStats) -> np.ndarray:
        v = int(v)
        raw = self._read(self._adj_fd, int(self._lengths[v]), int(self._offsets[v]), v, stats)
        stats.adjacency_fetches += 1
        return np.frombuffer(raw, dtype="<i4")[1:].astype(np.int64)

    def read_vector(self, v: int, stats: IOStats) -> np.ndarray:
        v = int(v)
        raw = self._read(self._vec_fd, self.slot, v * self.slot, v, stats)
        stats.vector_fetches += 1
        return np.frombuffer(raw[: self.dim * 4], dtype="<f4")


def search_in_memory(g: ProximityGraph, model, codes: np.ndarray, q, h: int, k: int,
                     rotation: np.ndarray | None = None) -> SearchResult:
    """Beam search driven only by ADC distances from the query's lookup table."""
    if len(codes) != g.n:
        raise ValueError("codes must cover every graph vertex")
    lut = model.lookup(np.asarray(q, dtype=np.float64), rotation)
    return beam_search(g, lambda ids: adc_distances(codes[ids], lut), h, k)


def _exact_rank(store: HybridStore, ids, q, stats: IOStats, cache: dict) -> list[tuple[float, int]]:
    ranked = []
    for v in ids:
        v = int(v)
        if v not in cache:
            x = store.read_vector(v, stats).astype(np.float64)
            diff = x - q
            cache[v] = float(diff @ diff)
        ranked.append((cache[v], v))
    ranked.sort()
    return ranked


def search_hybrid(store: HybridStore, g: ProximityGraph, model, codes: np.ndarray, q, h: int, k: int,
                  rerank_depth: int | None = None, *, progressive: bool = False,
                  rotation: np.ndarray | None = None) -> tuple[SearchResult, IOStats]:
    """ADC-navigated search that reads adjacency from disk and reranks exactly.

    With ``progressive=False`` the ``rerank_depth`` best pool members (by ADC)
    are fetched once at the end and re-sorted by exact distance. With
    ``progressive=True`` every expanded vertex is also fetched as it is
    visited, and the final ranking covers those vertices too.
    Returns the result and the I/O counters owned by this query.
    """
    rerank_depth = h if rerank_depth is None else int(rerank_depth)
    if rerank_depth < k:
        raise ValueError("rerank_depth must be at least k")
    if len(codes) != g.n or store.n != g.n:
        raise ValueError("codes, store and graph sizes differ")
    q = np.asarray(q, dtype=np.float64)
    lut = model.lookup(q, rotation)
    stats = IOStats()
    exact: dict[int, float] = {}
    visited: list[int] = []

    def neighbors(v):
        if progressive:
            visited.append(int(v))
            _exact_rank(store, [v], q, stats, exact)
        return store.read_neighbors(v, stats)

    res = beam_search(g, lambda ids: adc_distances(codes[ids], lut), h, k, neighbors=neighbors, entry=store.entry)
    shortlist = [u for _, u in res.pool[:rerank_depth]]
    ranked = _exact_rank(store, list(dict.fromkeys(shortlist + visited)), q, stats, exact)
    top = ranked[:k]
    out = SearchResult(
        np.array([u for _, u in top], dtype=np.int64),
        np.array([d for d, _ in top]),
        res.hops,
        res.distance_evals,
        res.pool,
    )
    return out, stats


@dataclass(frozen=True)
class MemoryBudget:
    fraction: float
    raw_bytes: int
    graph_bytes: int

    @property
    def budget_bytes(self) -> float:
        return self.fraction * (self.raw_bytes + self.graph_bytes)


@dataclass(frozen=True)
class BudgetCheck:
    admissible: bool
    detail: dict = field(default_factory=dict)


def check_budget(n: int, d: int, m: int, k_codewords: int, f: float, graph_bytes: int) -> BudgetCheck:
    """Whether codes, codebook and rotation fit in ``f`` times the raw data plus graph size.

    ``k_codewords`` is the number of codewords per chunk; the codebook holds
    K sub-vectors in each of the M chunks, i.e. K*D floats in total.
    """
    if min(n, d, m, k_codewords) < 1 or not 0 < f <= 1 or graph_bytes < 0:
        raise ValueError("arguments must be positive and 0 < f <= 1")
    budget = MemoryBudget(float(f), n * d * 4, int(graph_bytes))
    detail = {
        "code_bytes": code_bytes(n, m, k_codewords),
        "codebook_bytes": k_codewords * d * 4,
        "rotation_bytes": d * d * 4,
    }
    detail["total_bytes"] = sum(detail.values())
    detail["raw_bytes"] = budget.raw_bytes
    detail["graph_bytes"] = budget.graph_bytes
    detail["budget_bytes"] = budget.budget_bytes
    return BudgetCheck(detail["total_bytes"] <= budget.budget_bytes, detail)


def eq5_diagnostic(x_a, x_b, q) -> dict:
    """Compare ``|x_a-q|^2 - |x_b-q|^2`` with ``2 |x_b-x_a| |q-mid| cos(theta)``.

    ``mid`` is the midpoint of ``x_a`` and ``x_b`` and theta is the angle
    between ``x_b - x_a`` and ``q - mid``. A zero vector on either side makes
    theta undefined; cos(theta) is then reported as 0.
    """
    a, b, q = (np.asarray(v, dtype=np.float64) for v in (x_a, x_b, q))
    if not a.shape == b.shape == q.shape:
        raise ValueError("vectors must have equal dimensions")
    lhs = float(np.sum((a - q) ** 2) - np.sum((b - q) ** 2))
    edge = b - a
    off = q - 0.5 * (a + b)
    n_edge, n_off = float(np.linalg.norm(edge)), float(np.linalg.norm(off))
    if n_edge == 0.0:
        return {"lhs": lhs, "rhs": 0.0, "cos_theta": 0.0, "abs_error": 0.0}
    cos = float(edge @ off / (n_edge * n_off)) if n_off > 0 else 0.0
    rhs = 2.0 * n_edge * n_off * cos
    return {"lhs": lhs, "rhs": rhs, "cos_theta": cos, "abs_error": abs(lhs - rhs)}

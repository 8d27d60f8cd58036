"""Training features drawn from a proximity graph.

* neighborhood triplets: anchor, a positive among the closest vertices of its
  n-hop neighborhood, and a (hard) negative from the next band of ranks;
* routing traces: the ranked candidate pools met along an ADC-guided beam
  search, each labelled with the candidate an exact-distance teacher prefers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import as_array
from .graph import ProximityGraph, beam_search
from .pq import Codebook, adc_distances, build_lookup, encode

__all__ = [
    "SamplingError",
    "TripletSample",
    "DecisionRecord",
    "RoutingTrace",
    "n_hop_neighborhood",
    "n_propagation_sample",
    "sample_triplets",
    "collect_routing_traces",
    "dump_traces",
]


class SamplingError(ValueError):
    """The n-hop neighborhood is too small for the requested sample bands."""


@dataclass(frozen=True)
class TripletSample:
    anchor: int
    positive: int
    negative: int


@dataclass
class DecisionRecord:
    candidates: np.ndarray
    chosen: int
    adc: np.ndarray = field(default=None, repr=False)


@dataclass
class RoutingTrace:
    query: np.ndarray
    steps: list[DecisionRecord]
    query_id: int = -1

    @property
    def length(self) -> int:
        return len(self.steps)


def n_hop_neighborhood(g: ProximityGraph, v: int, n: int) -> set[int]:
    """Vertices within ``n`` hops of ``v``, excluding ``v``, by frontier propagation."""
    v = int(v)
    if n < 1:
        return set()
    hood = {int(u) for u in g.neighbors_of(v)}
    visit = {v}
    frontier = hood
    for _ in range(n - 1):
        visit |= frontier
        grown = set()
        for vi in frontier:
            grown.update(int(u) for u in g.neighbors_of(vi))
        frontier = grown - visit - hood
        hood |= frontier
    hood.discard(v)
    return hood


def _ranked_neighborhood(g, data, v, n):
    hood = np.array(sorted(n_hop_neighborhood(g, v, n)), dtype=np.int64)
    diff = data[hood].astype(np.float64) - data[v].astype(np.float64)
    dist = np.einsum("ij,ij->i", diff, diff)
    return hood[np.lexsort((hood, dist))]


def n_propagation_sample(g, data, v: int, n: int, k_pos: int, k_neg: int, seed=None) -> TripletSample:
    """Draw one triplet for anchor ``v``.

    The positive is uniform over the ``k_pos`` nearest members of the n-hop
    neighborhood; the negative is uniform over the following ``k_neg`` ranks.
    """
    data = as_array(data)
    if k_pos < 1 or k_neg < 1:
        raise ValueError("k_pos and k_neg must be positive")
    ranked = _ranked_neighborhood(g, data, v, n)
    if len(ranked) < k_pos + k_neg:
        raise SamplingError(
            f"vertex {v} has {len(ranked)} vertices within {n} hops, need {k_pos + k_neg}"
        )
    rng = np.random.default_rng(seed)
    pos = int(ranked[rng.integers(k_pos)])
    neg = int(ranked[k_pos + rng.integers(k_neg)])
    return TripletSample(int(v), pos, neg)


def sample_triplets(g, data, count: int, n: int, k_pos: int, k_neg: int, rng: np.random.Generator, max_tries: int = 20) -> np.ndarray:
    """``count`` triplets with anchors drawn uniformly; returns a (count, 3) id array.

    Anchors whose neighborhood is too small are redrawn up to ``max_tries``
    times per slot.
    """
    data = as_array(data)
    out = np.empty((count, 3), dtype=np.int64)
    filled = 0
    tries = 0
    while filled < count:
        v = int(rng.integers(g.n))
        try:
            t = n_propagation_sample(g, data, v, n, k_pos, k_neg, rng)
        except SamplingError:
            tries += 1
            if tries > max_tries * count:
                raise
            continue
        out[filled] = (t.anchor, t.positive, t.negative)
        filled += 1
    return out


def collect_routing_traces(
    g: ProximityGraph,
    data,
    rotation: np.ndarray,
    codebook: Codebook,
    queries: np.ndarray,
    h: int,
    codes: np.ndarray | None = None,
    query_ids=None,
    leave_out: bool = False,
) -> list[RoutingTrace]:
    """Replay ADC beam search for every query and record each ranked pool.

    The teacher choice at each step is the pool member with the smallest
    exact distance to the query (first in ADC rank on ties).

    With ``leave_out`` each query's own vertex (from ``query_ids``) is hidden
    from its search, so a query drawn from the base set routes as an unseen
    one would instead of homing in on its zero-distance copy.
    """
    data = as_array(data)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if h < 1:
        raise ValueError("beam width must be positive")
    if leave_out and query_ids is None:
        raise ValueError("leave_out needs query_ids")
    if codes is None:
        codes = encode(data, rotation, codebook)
    traces = []
    for qi, q in enumerate(queries):
        lut = build_lookup(q, rotation, codebook)
        steps: list[DecisionRecord] = []

        qid = -1 if query_ids is None else int(query_ids[qi])
        hidden = qid if leave_out else -1

        def record(pool, q=q):
            pool = [(d, u) for d, u in pool if u != hidden]
            if not pool:
                return
            ids = np.array([u for _, u in pool], dtype=np.int64)
            adc = np.array([d for d, _ in pool])
            diff = data[ids].astype(np.float64) - q
            exact = np.einsum("ij,ij->i", diff, diff)
            steps.append(DecisionRecord(ids, int(np.argmin(exact)), adc))

        def distance(ids, lut=lut):
            d = adc_distances(codes[ids], lut)
            if hidden >= 0:
                d[ids == hidden] = np.inf
            return d

        beam_search(g, distance, h, 1, on_step=record)
        traces.append(RoutingTrace(q, steps, qid))
    return traces


def dump_traces(traces: list[RoutingTrace], path: str | os.PathLike) -> None:
    """Debug dump, one trace per line: ``query_id L | c,c,c@chosen | ...``."""
    with open(path, "w") as fh:
        for t in traces:
            steps = " | ".join(
                ",".join(str(int(c)) for c in s.candidates) + f"@{s.chosen}" for s in t.steps
            )
            fh.write(f"{t.query_id} {t.length} | {steps}\n")

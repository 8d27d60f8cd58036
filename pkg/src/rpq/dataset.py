"""Vector dataset I/O for the TEXMEX container formats (fvecs/bvecs/ivecs),
synthetic data generators and exact ground truth."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VectorFormatError",
    "VectorDataset",
    "GroundTruth",
    "load_vectors",
    "save_vectors",
    "load_ground_truth",
    "save_ground_truth",
    "compute_ground_truth",
    "make_synthetic",
    "make_sift_like",
    "sample_training_subset",
    "as_array",
]

_PAYLOAD = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


class VectorFormatError(ValueError):
    """Raised when a vector file does not follow the record layout."""


@dataclass
class VectorDataset:
    """N dense vectors of dimension D, stored row-major as float32."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {data.shape}")
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("dataset contains non-finite entries")
        self.data = np.ascontiguousarray(data, dtype=np.float32)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.count


@dataclass
class GroundTruth:
    """Row q holds the indices of the k exact nearest base vectors of query q."""

    neighbors: np.ndarray

    def __post_init__(self):
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int64)
        if self.neighbors.ndim != 2:
            raise ValueError("ground truth must be a 2-D integer matrix")

    @property
    def k(self) -> int:
        return int(self.neighbors.shape[1])


def as_array(data) -> np.ndarray:
    """The float32 matrix behind a :class:`VectorDataset`, or ``data`` itself."""
    return data.data if isinstance(data, VectorDataset) else np.asarray(data)


def _check_format(fmt: str) -> np.dtype:
    try:
        return _PAYLOAD[fmt]
    except KeyError:
        raise ValueError(f"unknown vector format {fmt!r}; expected one of {sorted(_PAYLOAD)}") from None


def _read_records(raw: bytes, payload: np.dtype, path) -> np.ndarray:
    if not raw:
        return np.zeros((0, 0), dtype=payload)
    if len(raw) < 4:
        raise VectorFormatError(f"{path}: truncated record header")
    dim = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if dim <= 0:
        raise VectorFormatError(f"{path}: non-positive dimension {dim} in first record")
    rec = 4 + dim * payload.itemsize
    if len(raw) % rec == 0:
        n = len(raw) // rec
        block = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
        headers = block[:, :4].copy().view("<i4").ravel()
        if np.all(headers == dim):
            return block[:, 4:].copy().view(payload).reshape(n, dim)
    # Slow path: walk records to report the first defect precisely.
    offset, index = 0, 0
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise VectorFormatError(f"{path}: truncated header in record {index}")
        d = int(np.frombuffer(raw, dtype="<i4", count=1, offset=offset)[0])
        if d != dim:
            raise VectorFormatError(
                f"{path}: record {index} has dimension {d}, expected {dim}"
            )
        if offset + rec > len(raw):
            raise VectorFormatError(f"{path}: truncated payload in record {index}")
        offset += rec
        index += 1
    raise VectorFormatError(f"{path}: inconsistent record layout")  # pragma: no cover


def load_vectors(path: str | os.PathLike, fmt: str | None = None) -> VectorDataset:
    """Load an fvecs/bvecs/ivecs file.

    Every record is a little-endian int32 dimension header followed by that many
    payload entries. bvecs and ivecs payloads are widened to float32.
    """
    if fmt is None:
        fmt = os.fspath(path).rsplit(".", 1)[-1]
    payload = _check_format(fmt)
    with open(path, "rb") as fh:
        raw = fh.read()
    return VectorDataset(_read_records(raw, payload, path).astype(np.float32))


def save_vectors(path: str | os.PathLike, data, fmt: str | None = None) -> None:
    if fmt is None:
        fmt = os.fspath(path).rsplit(".", 1)[-1]
    payload = _check_format(fmt)
    if isinstance(data, VectorDataset):
        data = data.data
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    n, d = arr.shape
    if payload.kind in "iu":
        info = np.iinfo(payload)
        if arr.size and (np.any(arr != np.round(arr)) or arr.min() < info.min or arr.max() > info.max):
            raise ValueError(f"values not representable in {fmt}")
    body = arr.astype(payload)
    out = np.empty((n, 4 + d * payload.itemsize), dtype=np.uint8)
    out[:, :4] = np.frombuffer(np.int32(d).astype("<i4").tobytes(), dtype=np.uint8)
    out[:, 4:] = body.view(np.uint8).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    with open(path, "rb") as fh:
        raw = fh.read()
    return GroundTruth(_read_records(raw, _PAYLOAD["ivecs"], path))


def save_ground_truth(path: str | os.PathLike, gt: GroundTruth) -> None:
    neighbors = gt.neighbors if isinstance(gt, GroundTruth) else np.asarray(gt)
    save_vectors(path, neighbors, "ivecs")


def _exact_topk(base: np.ndarray, base_sq: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    # Shortlist with the expansion formula, then re-rank the shortlist by direct
    # differences so the final order (and ties) follow the exact distance.
    n = base.shape[0]
    short = min(n, k + 32)
    q64 = queries.astype(np.float64)
    approx = base_sq[None, :] - 2.0 * (q64 @ base.T)
    if short < n:
        cand = np.argpartition(approx, short - 1, axis=1)[:, :short]
    else:
        cand = np.broadcast_to(np.arange(n), (len(queries), n))
    out = np.empty((len(queries), k), dtype=np.int64)
    for row in range(len(queries)):
        ids = np.sort(cand[row])
        diff = base[ids] - q64[row]
        dist = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((ids, dist))
        out[row] = ids[order[:k]]
    return out


def compute_ground_truth(base, queries, k: int, workers: int = 1, block: int = 256) -> GroundTruth:
    """Exact k nearest neighbors under squared Euclidean distance.

    Ties are broken by the lower base index. The result does not depend on
    ``workers``; each block of queries is processed independently.
    """
    base_arr = base.data if isinstance(base, VectorDataset) else np.asarray(base, dtype=np.float32)
    q_arr = queries.data if isinstance(queries, VectorDataset) else np.asarray(queries, dtype=np.float32)
    if q_arr.ndim == 1:
        q_arr = q_arr[None, :]
    if k < 1:
        raise ValueError("k must be positive")
    if k > base_arr.shape[0]:
        raise ValueError(f"k={k} exceeds the base size {base_arr.shape[0]}")
    if base_arr.shape[1] != q_arr.shape[1]:
        raise ValueError("base and query dimensions differ")
    b64 = base_arr.astype(np.float64)
    b_sq = np.einsum("ij,ij->i", b64, b64)
    starts = list(range(0, len(q_arr), block))

    def run(s):
        return _exact_topk(b64, b_sq, q_arr[s : s + block], k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return GroundTruth(np.zeros((0, k), dtype=np.int64))
    return GroundTruth(np.vstack(parts))


def make_synthetic(n: int, d: int, clusters: int, seed: int, spread: float = 10.0) -> VectorDataset:
    """Isotropic Gaussian blobs of unit variance around random centers."""
    if n < 1 or d < 1 or clusters < 1:
        raise ValueError("n, d and clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(clusters, d))
    labels = rng.integers(0, clusters, size=n)
    data = centers[labels] + rng.normal(size=(n, d))
    return VectorDataset(data.astype(np.float32))


def make_sift_like(n: int, d: int = 128, seed: int = 0, clusters: int = 64, rank: int = 24) -> VectorDataset:
    """Non-negative, integer-valued vectors with SIFT-like structure.

    Points are drawn from clustered low-rank factors plus noise. Per-dimension
    variance decays along the coordinate axis, so a plain contiguous split
    gives unbalanced chunks (the situation a learned rotation is meant to fix).
    """
    if n < 1 or d < 1 or clusters < 1 or rank < 1:
        raise ValueError("n, d, clusters and rank must be positive")
    rng = np.random.default_rng(seed)
    decay = np.exp(-np.arange(d) / (d / 4.0))
    basis = rng.normal(size=(rank, d)) * (40.0 * decay)
    centers = rng.normal(size=(clusters, rank))
    labels = rng.integers(0, clusters, size=n)
    latent = centers[labels] + 0.45 * rng.normal(size=(n, rank))
    noise = rng.normal(size=(n, d)) * (4.0 + 6.0 * decay)
    raw = 30.0 + latent @ basis + noise
    return VectorDataset(np.clip(np.rint(raw), 0, 255).astype(np.float32))


def sample_training_subset(data, size: int, seed: int) -> np.ndarray:
    """Indices of a uniform random subset without replacement, in ascending order."""
    n = data.count if isinstance(data, VectorDataset) else len(data)
    if size >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))

"""Product quantization primitives: codebooks, hard/soft encoding, lookup
tables and ADC/SDC distances.

All encoding happens in the rotated space: a vector ``x`` is first mapped to
``R @ x`` and then split into ``M`` contiguous chunks of ``D/M`` coordinates.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Codebook",
    "LookupTable",
    "kmeans",
    "train_codebook",
    "encode",
    "decode",
    "build_lookup",
    "adc_distance",
    "adc_distances",
    "sdc_distance",
    "assignment_probs",
    "gumbel_soft_assign",
    "soft_decode",
    "code_bytes",
    "pack_codes",
    "unpack_codes",
    "save_codes",
    "load_codes",
]


@dataclass
class Codebook:
    """M sub-codebooks of K codewords each, shape (M, K, D/M)."""

    words: np.ndarray

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.float64)
        if self.words.ndim != 3 or self.words.shape[1] < 1:
            raise ValueError(f"codebook must have shape (M, K, D/M), got {self.words.shape}")
        if not np.all(np.isfinite(self.words)):
            raise ValueError("codebook contains non-finite codewords")

    @property
    def m(self) -> int:
        return self.words.shape[0]

    @property
    def k(self) -> int:
        return self.words.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.words.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.sub_dim


@dataclass
class LookupTable:
    """entries[j, k] = squared distance between query chunk j and codeword k of chunk j."""

    entries: np.ndarray
    query_dim: int

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def k(self) -> int:
        return self.entries.shape[1]


def _rotate(x: np.ndarray, r: np.ndarray | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x if r is None else x @ np.asarray(r, dtype=np.float64).T


def _split(y: np.ndarray, m: int) -> np.ndarray:
    """(..., D) -> (..., M, D/M)."""
    dim = y.shape[-1]
    if dim % m:
        raise ValueError(f"chunk count M={m} must divide D={dim}")
    return y.reshape(*y.shape[:-1], m, dim // m)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p_sq = np.einsum("ij,ij->i", points, points)
    c_sq = np.einsum("ij,ij->i", centers, centers)
    d = p_sq[:, None] - 2.0 * points @ centers.T + c_sq[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assign(points: np.ndarray, centers: np.ndarray, block: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    # argmin of |c|^2 - 2<p, c>; the per-row |p|^2 is added back afterwards.
    labels = np.empty(len(points), dtype=np.int64)
    best = np.empty(len(points))
    c_sq = np.einsum("ij,ij->i", centers, centers)
    ct = np.ascontiguousarray(centers.T)
    for s in range(0, len(points), block):
        p = points[s : s + block]
        d = p @ ct
        d *= -2.0
        d += c_sq
        lab = np.argmin(d, axis=1)
        labels[s : s + block] = lab
        best[s : s + block] = np.maximum(d[np.arange(len(lab)), lab] + np.einsum("ij,ij->i", p, p), 0.0)
    return labels, best


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = points[idx]
        np.minimum(closest, _sq_dists(points, centers[i : i + 1])[:, 0], out=closest)
    return centers


def kmeans(points, k: int, iters: int = 20, seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns the centroids and the mean distortion after every assignment step.
    Empty clusters keep their previous centroid, so the distortion never rises.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if len(points) < k:
        raise ValueError(f"need at least k={k} training points, got {len(points)}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    history = []
    for _ in range(max(iters, 1)):
        labels, best = _assign(points, centers)
        history.append(float(best.mean()))
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=points[:, j], minlength=k) for j in range(points.shape[1])], axis=1)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    _, best = _assign(points, centers)
    history.append(float(best.mean()))
    return centers, history


def train_codebook(subvectors, k: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Run k-means independently on every chunk.

    ``subvectors`` is a sequence of M arrays of shape (N, D/M), or an (M, N, D/M)
    array. Chunk j uses seed ``seed + j``.
    """
    words = [kmeans(chunk, k, iters, seed + j)[0] for j, chunk in enumerate(subvectors)]
    return Codebook(np.stack(words))


def _chunk_dists(sub: np.ndarray, c: Codebook) -> np.ndarray:
    """sub: (N, M, d) -> (N, M, K) squared distances to every codeword."""
    return _chunk_dists_major(sub.transpose(1, 0, 2), c).transpose(1, 0, 2)


def _chunk_dists_major(st: np.ndarray, c: Codebook) -> np.ndarray:
    # st: (M, N, d) -> (M, N, K)
    c_sq = np.einsum("mkd,mkd->mk", c.words, c.words)
    d = st @ c.words.transpose(0, 2, 1)
    d *= -2.0
    d += c_sq[:, None, :]
    d += np.einsum("mnd,mnd->mn", st, st)[:, :, None]
    np.maximum(d, 0.0, out=d)
    return d


def encode(x, r: np.ndarray | None, c: Codebook, block: int = 8192) -> np.ndarray:
    """Hard PQ codes (argmin per chunk, lowest id on ties).

    Accepts one vector (returns shape (M,)) or a batch (returns (N, M)).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    if xs.shape[1] != c.dim:
        raise ValueError(f"vector dimension {xs.shape[1]} does not match codebook dimension {c.dim}")
    dtype = np.uint8 if c.k <= 256 else (np.uint16 if c.k <= 65536 else np.int64)
    codes = np.empty((len(xs), c.m), dtype=dtype)
    for s in range(0, len(xs), block):
        sub = _split(_rotate(xs[s : s + block], r), c.m)
        codes[s : s + block] = np.argmin(_chunk_dists_major(sub.transpose(1, 0, 2), c), axis=2).T
    return codes[0] if single else codes


def decode(code, c: Codebook) -> np.ndarray:
    """Concatenate the selected codewords (a vector in the rotated space)."""
    code = np.asarray(code)
    if code.shape[-1] != c.m:
        raise ValueError(f"code length {code.shape[-1]} does not match M={c.m}")
    if code.size and (code.min() < 0 or code.max() >= c.k):
        raise IndexError(f"codeword id out of range [0, {c.k})")
    idx = code.astype(np.int64)
    words = c.words[np.arange(c.m), idx]
    return words.reshape(*code.shape[:-1], c.dim)


def build_lookup(q, r: np.ndarray | None, c: Codebook) -> LookupTable:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != c.dim:
        raise ValueError(f"query dimension {q.shape[-1]} does not match codebook dimension {c.dim}")
    sub = _split(_rotate(q, r), c.m)
    diff = c.words - sub[:, None, :]
    return LookupTable(np.einsum("mkd,mkd->mk", diff, diff), q.shape[-1])


def adc_distance(code, lut: LookupTable) -> float:
    code = np.asarray(code, dtype=np.int64)
    return float(lut.entries[np.arange(lut.m), code].sum())


def adc_distances(codes: np.ndarray, lut: LookupTable) -> np.ndarray:
    """Vectorised ADC for an (N, M) code matrix."""
    return lut.entries[np.arange(lut.m), codes.astype(np.intp)].sum(axis=-1)


def sdc_distance(a, b, c: Codebook) -> float:
    diff = decode(a, c) - decode(b, c)
    return float(diff @ diff)


def _softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def assignment_probs(subvec, chunk: int, c: Codebook) -> np.ndarray:
    """Softmax over negative squared distances to the codewords of one chunk."""
    subvec = np.asarray(subvec, dtype=np.float64)
    diff = c.words[chunk] - subvec
    return _softmax(-np.einsum("kd,kd->k", diff, diff))


def gumbel_soft_assign(probs, tau: float, seed=None, noise: bool = True) -> np.ndarray:
    """softmax((log p + z) / tau) with z ~ Gumbel(0, 1), or z = 0 without noise.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(probs)
    if noise:
        rng = np.random.default_rng(seed)
        u = rng.random(probs.shape)
        u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
        logits = logits - np.log(-np.log(u))
    return _softmax(logits / tau)


def soft_decode(soft, c: Codebook) -> np.ndarray:
    """Per chunk, the convex combination of codewords weighted by ``soft`` (M, K)."""
    soft = np.asarray(soft, dtype=np.float64)
    out = np.einsum("...mk,mkd->...md", soft, c.words)
    return out.reshape(*soft.shape[:-2], c.dim)


def code_bytes(n: int, m: int, k: int) -> int:
    """Bytes needed for n codes when each id uses ceil(log2 K) bits, tightly packed."""
    bits = max(1, math.ceil(math.log2(k))) if k > 1 else 1
    return math.ceil(n * m * bits / 8)


def pack_codes(codes: np.ndarray, k: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint32)
    bits = max(1, math.ceil(math.log2(k))) if k > 1 else 1
    flat = codes.reshape(-1)
    # Little-endian bit order within each id, ids laid out consecutively.
    table = ((flat[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(table.reshape(-1), bitorder="little").tobytes()


def unpack_codes(blob: bytes, n: int, m: int, k: int) -> np.ndarray:
    bits = max(1, math.ceil(math.log2(k))) if k > 1 else 1
    flat = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")[: n * m * bits]
    table = flat.reshape(n * m, bits).astype(np.uint32)
    ids = (table << np.arange(bits, dtype=np.uint32)).sum(axis=1)
    return ids.reshape(n, m)


_CODES_HEADER = struct.Struct("<III")


def save_codes(path: str | os.PathLike, codes: np.ndarray, k: int) -> None:
    """Header {N, M, K} as uint32, then N*M bytes (K <= 256)."""
    codes = np.asarray(codes)
    if k > 256:
        raise ValueError("the code file format stores one byte per id (K <= 256)")
    n, m = codes.shape
    with open(path, "wb") as fh:
        fh.write(_CODES_HEADER.pack(n, m, k))
        fh.write(codes.astype(np.uint8).tobytes())


def load_codes(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CODES_HEADER.size:
        raise ValueError(f"{path}: truncated code file header")
    n, m, k = _CODES_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype=np.uint8, offset=_CODES_HEADER.size)
    if body.size != n * m:
        raise ValueError(f"{path}: expected {n * m} code bytes, found {body.size}")
    codes = body.reshape(n, m).copy()
    if codes.size and codes.max() >= k:
        raise ValueError(f"{path}: codeword id out of range for K={k}")
    return codes, k

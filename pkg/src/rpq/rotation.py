"""Learnable orthonormal rotation R = exp(A) for a skew-symmetric A.

A is stored by its strict upper triangle. The exponential uses scaling and
squaring around a fixed-order Taylor polynomial; the backward pass replays
exactly that computation in reverse, so gradients match the computed forward
value rather than the analytic derivative of the true exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TAYLOR_ORDER",
    "SkewParam",
    "skew_from_upper",
    "upper_from_matrix",
    "matrix_exponential",
    "expm_forward",
    "exp_backward",
    "decompose",
]

TAYLOR_ORDER = 12
_SCALED_NORM = 0.5


@dataclass
class SkewParam:
    """Strict upper triangle of a D x D skew-symmetric matrix."""

    dim: int
    upper: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        size = self.dim * (self.dim - 1) // 2
        if self.upper is None:
            self.upper = np.zeros(size)
        self.upper = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if self.upper.size != size:
            raise ValueError(f"expected {size} parameters for D={self.dim}, got {self.upper.size}")

    @classmethod
    def zeros(cls, dim: int) -> "SkewParam":
        return cls(dim)

    def matrix(self) -> np.ndarray:
        return skew_from_upper(self.upper, self.dim)


def skew_from_upper(upper: np.ndarray, dim: int) -> np.ndarray:
    a = np.zeros((dim, dim))
    iu = np.triu_indices(dim, k=1)
    a[iu] = upper
    return a - a.T


def upper_from_matrix(a: np.ndarray) -> np.ndarray:
    return np.asarray(a)[np.triu_indices(a.shape[0], k=1)].copy()


def _num_squarings(a: np.ndarray) -> int:
    norm = np.abs(a).sum(axis=0).max() if a.size else 0.0
    if norm <= _SCALED_NORM:
        return 0
    return int(math.ceil(math.log2(norm / _SCALED_NORM)))


def expm_forward(param) -> tuple[np.ndarray, dict]:
    """Return exp(A) and the intermediates needed by :func:`exp_backward`."""
    if isinstance(param, SkewParam):
        a = param.matrix()
    else:
        a = np.asarray(param, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("rotation parameters contain non-finite values")
    dim = a.shape[0]
    s = _num_squarings(a)
    scaled = a / (2.0**s)
    eye = np.eye(dim)
    # Horner form: H <- I + scaled @ H / i, for i = order..1.
    horner = [eye]
    h = eye
    for i in range(TAYLOR_ORDER, 0, -1):
        h = eye + (scaled @ h) / i
        horner.append(h)
    squares = [h]
    for _ in range(s):
        h = h @ h
        squares.append(h)
    cache = {"s": s, "scaled": scaled, "horner": horner, "squares": squares}
    return h, cache


def matrix_exponential(param) -> np.ndarray:
    """exp(A) for a :class:`SkewParam` (or a dense skew-symmetric matrix)."""
    return expm_forward(param)[0]


def exp_backward(param, upstream: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Gradient w.r.t. the upper-triangle parameters given dL/dR = ``upstream``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise FloatingPointError("upstream gradient contains non-finite values")
    if cache is None:
        cache = expm_forward(param)[1]
    s = cache["s"]
    scaled = cache["scaled"]
    horner = cache["horner"]
    squares = cache["squares"]
    g = upstream
    for t in range(s, 0, -1):
        x = squares[t - 1]
        g = g @ x.T + x.T @ g
    d_scaled = np.zeros_like(scaled)
    # horner[j] is the value after j steps; step j used divisor order-j+1.
    for j in range(TAYLOR_ORDER, 0, -1):
        i = TAYLOR_ORDER - j + 1
        prev = horner[j - 1]
        d_scaled += (g @ prev.T) / i
        g = (scaled.T @ g) / i
    d_a = d_scaled / (2.0**s)
    return upper_from_matrix(d_a - d_a.T)


def decompose(r: np.ndarray, x: np.ndarray, m: int) -> list[np.ndarray]:
    """Rotate ``x`` and split it into ``m`` contiguous sub-vectors."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    if m < 1 or dim % m:
        raise ValueError(f"chunk count M={m} must divide D={dim}")
    y = x @ np.asarray(r).T
    return np.split(y, m, axis=-1)

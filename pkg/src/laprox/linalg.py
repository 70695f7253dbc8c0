"""Dense float64 kernels shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks and edge conventions the rest of the package relies on.
"""
from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A numeric parameter is outside its allowed range."""


def as_matrix(data) -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Seeded generator (numpy PCG64). Same seed gives the same stream bit for bit.

    ``stream`` selects an independent substream of the same seed.
    """
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if stream is None:
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits: Matrix) -> Matrix:
    """Row-wise softmax. ``-inf`` entries are masked and come out exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any() or np.isposinf(logits).any():
        raise ParameterError("softmax input must be finite or -inf")
    row_max = logits.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise ParameterError("softmax row is entirely masked")
    e = np.exp(logits - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def col_l2_norms(m: Matrix) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", m, m))


def row_l2_norms(m: Matrix) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def avg_pool_1d(scores, kernel: int) -> np.ndarray:
    """Centered moving average; the window shrinks at the edges instead of padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"pooling kernel must be odd and >= 1, got {kernel}")
    v = np.asarray(scores, dtype=np.float64)
    if kernel == 1:
        return v.copy()
    n = v.shape[-1]
    half = kernel // 2
    csum = np.concatenate([np.zeros(v.shape[:-1] + (1,)), np.cumsum(v, axis=-1)], axis=-1)
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    return (csum[..., hi] - csum[..., lo]) / (hi - lo)


def cosine(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))

"""Dense float64 primitives shared by the rest of the package.

Everything here is pure and operates on plain numpy arrays. Random state
is always threaded explicitly: :func:`make_rng` wraps the Philox 4x64
counter-based bit generator, whose stream for a given seed is identical
on every platform, which is what makes whole training runs byte-for-byte
reproducible.
"""

from __future__ import annotations

import numpy as np

#: Probability floor used inside logarithms throughout the package.
LOG_FLOOR = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator. Same seed, same stream, every platform."""
    return np.random.Generator(np.random.Philox(seed))


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    A zero vector on either side yields 0 (neutral similarity) so that
    downstream similarity graphs stay finite for all-zero ReLU embeddings.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def pairwise_cosine(A: np.ndarray) -> np.ndarray:
    """Matrix of cosine similarities between all row pairs of ``A``.

    Zero rows behave as in :func:`cosine_similarity`: every similarity
    involving them is 0, including the diagonal entry.
    """
    A = np.asarray(A, dtype=np.float64)
    norms = np.linalg.norm(A, axis=1)
    nonzero = norms > 0.0
    U = np.zeros_like(A)
    U[nonzero] = A[nonzero] / norms[nonzero, None]
    return np.clip(U @ U.T, -1.0, 1.0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of empty input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def row_normalize(G: np.ndarray) -> np.ndarray:
    """Divide each row by its sum so rows become probability vectors.

    Raises ValueError if any row sum is not strictly positive.
    """
    G = np.asarray(G, dtype=np.float64)
    sums = G.sum(axis=1)
    if np.any(sums <= 0.0):
        bad = int(np.argmax(sums <= 0.0))
        raise ValueError(f"row {bad} has nonpositive sum {sums[bad]!r}")
    return G / sums[:, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)

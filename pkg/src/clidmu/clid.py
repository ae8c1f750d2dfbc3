"""Cross-layer information divergence: similarity graphs, loss, gradient.

For a batch of embeddings Z and class probabilities Q the embedding graph
holds exp(cos(z_i, z_j) / tau) and the class-probability graph holds
cos(q_i, q_j). Both are row-normalized, and the divergence is the mean
cross-entropy of the normalized embedding graph under the normalized
probability graph.

The gradient treats one branch as a constant ("stop-gradient"). With the
default ``target_q`` mode the probability graph is the frozen target, so
the gradient flows only through the embeddings and the head block of the
returned vector is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_FLOOR, pairwise_cosine, row_normalize
from .networks import (MlpClassifier, ParamVector, _backprop_from_dlogits,
                       backprop_embedding_gradient, classifier_forward, softmax_vjp)

SG_MODES = ("target_q", "target_e", "none")


def embedding_graph(Z: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled exponential cosine similarities of embedding rows."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[0] < 2:
        raise ValueError("need at least 2 rows to build a graph")
    return np.exp(pairwise_cosine(Z) / tau)


def class_prob_graph(Q: np.ndarray) -> np.ndarray:
    """Cosine similarities of class-probability rows."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if Q.shape[0] < 2:
        raise ValueError("need at least 2 rows to build a graph")
    return pairwise_cosine(Q)


@dataclass
class SimilarityGraphs:
    """Raw and row-normalized similarity graphs of one batch."""

    ge: np.ndarray
    gq: np.ndarray
    ge_hat: np.ndarray
    gq_hat: np.ndarray
    tau: float


def build_similarity_graphs(Z: np.ndarray, Q: np.ndarray, tau: float) -> SimilarityGraphs:
    ge = embedding_graph(Z, tau)
    gq = class_prob_graph(Q)
    return SimilarityGraphs(ge, gq, row_normalize(ge), row_normalize(gq), float(tau))


@dataclass
class ClidScore:
    """Nonnegative divergence value for a batch of a given size."""

    value: float
    batch_size: int

    def __float__(self):
        return self.value


def clid_loss(gq_hat: np.ndarray, ge_hat: np.ndarray) -> ClidScore:
    """Mean cross-entropy of the embedding graph under the probability graph."""
    gq_hat = np.asarray(gq_hat, dtype=np.float64)
    ge_hat = np.asarray(ge_hat, dtype=np.float64)
    if gq_hat.shape != ge_hat.shape or gq_hat.ndim != 2 or gq_hat.shape[0] != gq_hat.shape[1]:
        raise ValueError(f"graphs must be square and equal shape, got {gq_hat.shape} vs {ge_hat.shape}")
    m = gq_hat.shape[0]
    value = float(np.sum(-gq_hat * np.log(np.maximum(ge_hat, LOG_FLOOR))) / (m * m))
    return ClidScore(value, m)


def clid_from_batch(model: MlpClassifier, X: np.ndarray, tau: float) -> ClidScore:
    """Forward a batch and evaluate the divergence. Consumes no labels."""
    trace = classifier_forward(model, X)
    graphs = build_similarity_graphs(trace.Z, trace.Q, tau)
    return clid_loss(graphs.gq_hat, graphs.ge_hat)


def _row_normalize_vjp(d_hat: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. row-normalized entries back to the raw graph."""
    sums = raw.sum(axis=1, keepdims=True)
    return d_hat / sums - (np.sum(d_hat * raw, axis=1, keepdims=True) / sums ** 2)


def _pairwise_cosine_vjp(dC: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the pairwise cosine matrix back to the rows.

    Rows with zero norm contribute a zero gradient, matching the convention
    that their similarities are a constant 0.
    """
    norms = np.linalg.norm(A, axis=1)
    nonzero = norms > 0.0
    U = np.zeros_like(A)
    U[nonzero] = A[nonzero] / norms[nonzero, None]
    C = np.clip(U @ U.T, -1.0, 1.0)
    M = dC + dC.T
    # entries pairing a zero row with anything are constants
    M = M * np.outer(nonzero, nonzero)
    dA = (M @ U) - np.sum(M * C, axis=1, keepdims=True) * U
    dA[nonzero] /= norms[nonzero, None]
    dA[~nonzero] = 0.0
    return dA


def clid_grad(model: MlpClassifier, X_meta: np.ndarray, tau: float,
              sg_mode: str = "target_q") -> ParamVector:
    """Exact gradient of the batch divergence w.r.t. classifier parameters.

    ``sg_mode`` picks the stop-gradient branch: ``target_q`` freezes the
    probability graph (gradient reaches only extractor blocks), ``target_e``
    freezes the embedding graph, and ``none`` differentiates both.
    """
    if sg_mode not in SG_MODES:
        raise ValueError(f"sg_mode must be one of {SG_MODES}, got {sg_mode!r}")
    trace = classifier_forward(model, X_meta)
    graphs = build_similarity_graphs(trace.Z, trace.Q, tau)
    m = trace.batch_size
    scale = 1.0 / (m * m)

    grad = ParamVector.zeros(model.layout())
    if sg_mode in ("target_q", "none"):
        # d loss / d ge_hat, honoring the log floor exactly
        floored = graphs.ge_hat <= LOG_FLOOR
        d_ge_hat = np.where(floored, 0.0,
                            -scale * graphs.gq_hat / np.maximum(graphs.ge_hat, LOG_FLOOR))
        d_ge = _row_normalize_vjp(d_ge_hat, graphs.ge)
        d_cos = d_ge * graphs.ge / tau
        dZ = _pairwise_cosine_vjp(d_cos, trace.Z)
        grad.values += backprop_embedding_gradient(model, trace, dZ).values
    if sg_mode in ("target_e", "none"):
        d_gq_hat = -scale * np.log(np.maximum(graphs.ge_hat, LOG_FLOOR))
        d_gq = _row_normalize_vjp(d_gq_hat, graphs.gq)
        dQ = _pairwise_cosine_vjp(d_gq, trace.Q)
        dlogits = softmax_vjp(trace.Q, dQ)
        grad.values += _backprop_from_dlogits(model, trace, dlogits).values
    return grad

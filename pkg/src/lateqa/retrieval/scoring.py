"""Late-interaction scoring and the in-batch softplus contrastive loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from . import kernels
from .embedding import MultiVectorEmbedding, TrainingBatch

SOFTPLUS_LINEAR_THRESHOLD = 30.0


def late_interaction_score(query: MultiVectorEmbedding, doc: MultiVectorEmbedding) -> float:
    """Sum over query tokens of the best inner product against any document token.

    Raw inner products are used; rows are not normalized here.
    """
    if query.dim != doc.dim:
        raise InvalidInputError(f"dimension mismatch: query dim {query.dim} vs doc dim {doc.dim}")
    return float(kernels.maxsim(query.data, doc.data))


def softplus(x: float) -> float:
    """``log(1 + exp(x))``, returning ``x`` itself once the difference is below 1e-13."""
    if x > SOFTPLUS_LINEAR_THRESHOLD:
        return float(x)
    return math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ContrastiveLoss:
    loss: float
    score_matrix: np.ndarray
    hardest_negative: np.ndarray  # first argmax over l != k, per row k


def _hardest_negatives(scores: np.ndarray) -> np.ndarray:
    masked = scores.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1)


def loss_from_scores(scores: np.ndarray) -> ContrastiveLoss:
    """Evaluate the loss directly on a ``b x b`` score matrix (row = query, column = doc)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise InvalidInputError(f"score matrix must be square, got shape {scores.shape}")
    b = scores.shape[0]
    if b < 2:
        raise InvalidInputError("batch_size must be at least 2")
    neg = _hardest_negatives(scores)
    total = 0.0
    for k in range(b):
        total += softplus(scores[k, neg[k]] - scores[k, k])
    return ContrastiveLoss(loss=total / b, score_matrix=scores, hardest_negative=neg)


def score_matrix(batch: TrainingBatch) -> np.ndarray:
    b = batch.batch_size
    out = np.empty((b, b), dtype=np.float64)
    for k, q in enumerate(batch.queries):
        for l, d in enumerate(batch.documents):
            out[k, l] = kernels.maxsim(q.data, d.data)
    return out


def softplus_contrastive_loss(batch: TrainingBatch) -> ContrastiveLoss:
    """Mean over queries of softplus(hardest in-batch negative score - positive score)."""
    return loss_from_scores(score_matrix(batch))


def contrastive_loss_gradient(batch: TrainingBatch) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Analytic (sub)gradient of :func:`softplus_contrastive_loss`.

    Returns ``(query_grads, doc_grads)`` shaped like the batch embeddings. The
    gradient flows only through the first argmax document token of each query
    token, and only into the first hardest negative of each row.
    """
    b = batch.batch_size
    result = softplus_contrastive_loss(batch)
    scores, neg = result.score_matrix, result.hardest_negative
    q_grads = [np.zeros_like(q.data) for q in batch.queries]
    d_grads = [np.zeros_like(d.data) for d in batch.documents]

    for k in range(b):
        w = _sigmoid(scores[k, neg[k]] - scores[k, k]) / b
        q = batch.queries[k].data
        for l, sign in ((neg[k], w), (k, -w)):
            d = batch.documents[l].data
            _, arg = kernels.maxsim_argmax(q, d)
            q_grads[k] += sign * d[arg]
            np.add.at(d_grads[l], arg, sign * q)
    return q_grads, d_grads

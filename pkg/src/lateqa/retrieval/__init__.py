"""Multi-vector late-interaction retrieval."""

from .embedding import DEFAULT_DIM, MultiVectorEmbedding, TrainingBatch
from .index import (
    PageIndex,
    PageRecord,
    RetrievalHit,
    build_index,
    dumps_index,
    load_index,
    loads_index,
    retrieve_topk,
    save_index,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .scoring import (
    ContrastiveLoss,
    contrastive_loss_gradient,
    late_interaction_score,
    loss_from_scores,
    softplus,
    softplus_contrastive_loss,
)

__all__ = [
    "DEFAULT_DIM",
    "KERNEL_BACKEND",
    "ContrastiveLoss",
    "MultiVectorEmbedding",
    "PageIndex",
    "PageRecord",
    "RetrievalHit",
    "TrainingBatch",
    "build_index",
    "contrastive_loss_gradient",
    "dumps_index",
    "late_interaction_score",
    "load_index",
    "loads_index",
    "loss_from_scores",
    "retrieve_topk",
    "save_index",
    "softplus",
    "softplus_contrastive_loss",
]

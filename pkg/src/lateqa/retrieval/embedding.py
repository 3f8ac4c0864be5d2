"""Multi-vector embedding containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InvalidInputError

DEFAULT_DIM = 128
_NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class MultiVectorEmbedding:
    """Token-level embedding matrix of shape ``(token_count, dim)``.

    ``data`` is stored as a read-only C-contiguous float64 array. When
    ``normalized`` is set every row must have unit L2 norm (within 1e-6);
    scoring never normalizes on its own.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 2:
            raise InvalidInputError(f"embedding must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"embedding must have at least one token and one dim, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("embedding contains NaN or Inf")
        if self.normalized:
            norms = np.linalg.norm(arr, axis=1)
            if np.any(np.abs(norms - 1.0) > _NORM_TOL):
                raise InvalidInputError("embedding flagged normalized but has rows with norm != 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def token_count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @classmethod
    def normalize_rows(cls, rows) -> "MultiVectorEmbedding":
        arr = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InvalidInputError("cannot normalize a zero row")
        return cls(arr / norms, normalized=True)

    def __eq__(self, other):
        if not isinstance(other, MultiVectorEmbedding):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes(), self.normalized))

    def __repr__(self):
        return f"MultiVectorEmbedding(token_count={self.token_count}, dim={self.dim}, normalized={self.normalized})"


@dataclass(frozen=True)
class TrainingBatch:
    """Aligned query/document pairs; ``documents[k]`` is the positive for ``queries[k]``
    and every other document in the batch is an in-batch negative."""

    queries: Sequence[MultiVectorEmbedding]
    documents: Sequence[MultiVectorEmbedding] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "documents", tuple(self.documents))
        if len(self.queries) != len(self.documents):
            raise InvalidInputError(
                f"batch has {len(self.queries)} queries but {len(self.documents)} documents"
            )
        if len(self.queries) < 2:
            raise InvalidInputError("batch_size must be at least 2 (no in-batch negative otherwise)")
        dims = {e.dim for e in self.queries} | {e.dim for e in self.documents}
        if len(dims) != 1:
            raise InvalidInputError(f"all embeddings in a batch must share dim, got {sorted(dims)}")

    @property
    def batch_size(self) -> int:
        return len(self.queries)

    @property
    def dim(self) -> int:
        return self.queries[0].dim

"""Numpy implementations of the MaxSim kernels, used when the extension is not built."""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"

# elements per block of the broadcast product; keeps memory flat on long pages
_BLOCK = 1 << 20


def _sims(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Inner products ``q @ d.T`` where each entry is reduced on its own.

    A BLAS matmul may round an entry differently depending on how many rows it
    was batched with, which breaks bit-level guarantees such as "adding a doc
    row never lowers the score". Summing an explicit product row avoids that.
    """
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError(f"incompatible shapes {q.shape} and {d.shape}")
    if len(q) == 0 or len(d) == 0:
        raise ValueError("query and doc need at least one row")
    step = max(1, _BLOCK // max(1, q.size))
    out = np.empty((len(q), len(d)))
    for start in range(0, len(d), step):
        block = d[start:start + step]
        out[:, start:start + len(block)] = (q[:, None, :] * block[None, :, :]).sum(axis=2)
    return out


def maxsim(q: np.ndarray, d: np.ndarray) -> float:
    total = 0.0
    for best in _sims(q, d).max(axis=1):
        total += best
    return float(total)


def maxsim_argmax(q: np.ndarray, d: np.ndarray) -> tuple[float, np.ndarray]:
    sims = _sims(q, d)
    arg = sims.argmax(axis=1)  # first occurrence on ties
    total = 0.0
    for best in sims[np.arange(len(arg)), arg]:
        total += best
    return float(total), arg.astype(np.intp)


def score_pages(q: np.ndarray, flat: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.zeros(len(offsets) - 1, dtype=np.float64)
    for p in range(len(out)):
        out[p] = maxsim(q, flat[offsets[p]:offsets[p + 1]])
    return out

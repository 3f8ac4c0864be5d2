# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MaxSim kernels.

Every score goes through ``_page_sims`` (one dgemm per page) so a page scored on
its own and the same page scored inside an index scan produce identical bits.
"""

import numpy as np

from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"


cdef void _page_sims(const double* q, int nq, const double* d, int nd, int dim,
                     double* out) noexcept nogil:
    # out is column-major (nd x nq): out[i * nd + j] = <q_i, d_j>
    cdef char ta = b'T'
    cdef char tb = b'N'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&ta, &tb, &nd, &nq, &dim, &one, <double*>d, &dim, <double*>q, &dim, &zero, out, &nd)


cdef double _reduce_maxsim(const double* sims, int nq, int nd, Py_ssize_t* argmax) noexcept nogil:
    cdef int i, j
    cdef double best, v, total = 0.0
    cdef Py_ssize_t arg
    for i in range(nq):
        best = sims[i * nd]
        arg = 0
        for j in range(1, nd):
            v = sims[i * nd + j]
            if v > best:
                best = v
                arg = j
        if argmax != NULL:
            argmax[i] = arg
        total += best
    return total


def _as_rows(a, name):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _pair(q, d):
    q, d = _as_rows(q, "query"), _as_rows(d, "doc")
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {d.shape[1]}")
    if q.shape[0] == 0 or d.shape[0] == 0:
        raise ValueError("query and doc need at least one row")
    return q, d


def maxsim(q, d):
    """Sum over query rows of the max inner product against document rows."""
    q, d = _pair(q, d)
    return _maxsim(q, d)


def maxsim_argmax(q, d):
    """Like :func:`maxsim` but also returns the first argmax document row per query row."""
    q, d = _pair(q, d)
    return _maxsim_argmax(q, d)


def score_pages(q, flat, offsets):
    """Score every page stored row-contiguously in ``flat``.

    Page ``p`` occupies rows ``offsets[p]:offsets[p + 1]``; every page must be non-empty.
    """
    q, flat = _as_rows(q, "query"), _as_rows(flat, "flat")
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if q.shape[1] != flat.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {flat.shape[1]}")
    if q.shape[0] == 0:
        raise ValueError("query needs at least one row")
    if len(offsets) == 0 or offsets[0] != 0 or offsets[-1] != flat.shape[0] or np.any(np.diff(offsets) < 1):
        raise ValueError("offsets must start at 0, end at len(flat) and delimit non-empty pages")
    return _score_pages(q, flat, offsets)


def _maxsim(const double[:, ::1] q, const double[:, ::1] d):
    cdef int nq = q.shape[0], nd = d.shape[0], dim = q.shape[1]
    cdef double total
    cdef double* buf = <double*>malloc(nq * nd * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            _page_sims(&q[0, 0], nq, &d[0, 0], nd, dim, buf)
            total = _reduce_maxsim(buf, nq, nd, NULL)
    finally:
        free(buf)
    return total


def _maxsim_argmax(const double[:, ::1] q, const double[:, ::1] d):
    cdef int nq = q.shape[0], nd = d.shape[0], dim = q.shape[1]
    cdef double total
    arg = np.empty(nq, dtype=np.intp)
    cdef Py_ssize_t[::1] arg_view = arg
    cdef double* buf = <double*>malloc(nq * nd * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            _page_sims(&q[0, 0], nq, &d[0, 0], nd, dim, buf)
            total = _reduce_maxsim(buf, nq, nd, &arg_view[0])
    finally:
        free(buf)
    return total, arg


def _score_pages(const double[:, ::1] q, const double[:, ::1] flat, const int64_t[::1] offsets):
    cdef Py_ssize_t n_pages = offsets.shape[0] - 1
    cdef int nq = q.shape[0], dim = q.shape[1]
    cdef Py_ssize_t p, max_nd = 0, nd
    for p in range(n_pages):
        nd = offsets[p + 1] - offsets[p]
        if nd > max_nd:
            max_nd = nd
    out = np.zeros(n_pages, dtype=np.float64)
    if n_pages == 0:
        return out
    cdef double[::1] out_view = out
    cdef double* buf = <double*>malloc(nq * max_nd * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for p in range(n_pages):
                nd = offsets[p + 1] - offsets[p]
                _page_sims(&q[0, 0], nq, &flat[offsets[p], 0], <int>nd, dim, buf)
                out_view[p] = _reduce_maxsim(buf, nq, <int>nd, NULL)
    finally:
        free(buf)
    return out

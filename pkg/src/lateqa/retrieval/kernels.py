"""Kernel selection.

Uses the compiled ``_kernels`` extension when it is importable, otherwise the
numpy fallback. Set ``LATEQA_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)


def _load():
    if os.environ.get("LATEQA_PURE_PYTHON", "").strip() not in ("", "0"):
        return _fallback
    try:
        from . import _kernels
    except ImportError:
        logger.debug("compiled kernels unavailable; using numpy fallback")
        return _fallback
    return _kernels


_impl = _load()

BACKEND: str = _impl.BACKEND
maxsim = _impl.maxsim
maxsim_argmax = _impl.maxsim_argmax
score_pages = _impl.score_pages


def available_backends() -> dict:
    """Every importable kernel module by name, for tests and benchmarks."""
    found = {"numpy": _fallback}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found

"""Hot-loop kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import. Set ``SELFVOS_KERNELS=python`` to force
the numpy path (used by the benchmark and the parity tests).
"""

import logging
import os

import numpy as np

from . import _pykernels

log = logging.getLogger(__name__)

_forced = os.environ.get("SELFVOS_KERNELS", "").lower()
_c = None
if _forced != "python":
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        if _forced == "c":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "c" if _c is not None else "python"
_impl = _c if _c is not None else _pykernels


def im2col(x, kh, kw, stride):
    """Unfold padded ``(n, c, h, w)`` input into ``(n*ho*wo, c*kh*kw)`` patches."""
    return _impl.im2col(np.ascontiguousarray(x), int(kh), int(kw), int(stride))


def col2im(cols, shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back to ``shape``."""
    n, c, hp, wp = shape
    return _impl.col2im(np.ascontiguousarray(cols), n, c, hp, wp, int(kh), int(kw), int(stride))


def kmeans_assign(points, centroids):
    return _impl.kmeans_assign(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )


def get_backend(name):
    """Return the kernel module for ``"c"`` or ``"python"`` (for benchmarks/tests)."""
    if name == "python":
        return _pykernels
    if name == "c":
        if _c is None:
            raise ImportError("compiled kernels are not built")
        return _c
    raise ValueError(f"unknown backend {name!r}")

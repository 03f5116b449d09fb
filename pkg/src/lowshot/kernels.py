"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_kernels_py`` are used. Set ``LOWSHOT_KERNELS=python``
to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

_NAMES = (
    "im2col",
    "col2im",
    "depthwise_fwd",
    "depthwise_bwd",
    "resize_fwd",
    "resize_bwd",
    "sample_fwd",
    "sample_bwd",
)


def _load_compiled():
    if os.environ.get("LOWSHOT_KERNELS", "").lower() == "python":
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"


def use(backend):
    """Switch the active backend at runtime ("cython" or "python")."""
    global BACKEND
    if backend == "cython" and _compiled is None:
        raise RuntimeError("compiled kernels are not available")
    if backend not in ("cython", "python"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    BACKEND = backend


def available():
    return ["python"] + (["cython"] if _compiled is not None else [])


# the numpy version of these is a pair of BLAS matmuls and beats the compiled loop
_BLAS_WINS = {"resize_bwd"}


def _impl(name):
    mod = _compiled if BACKEND == "cython" and name not in _BLAS_WINS else _kernels_py
    return getattr(mod, name)


def _c(a):
    return np.ascontiguousarray(a)


def im2col(xp, kh, kw, stride):
    return _impl("im2col")(_c(xp), kh, kw, stride)


def col2im(cols, xp_shape, kh, kw, stride):
    return _impl("col2im")(_c(cols), tuple(xp_shape), kh, kw, stride)


def depthwise_fwd(xp, k):
    return _impl("depthwise_fwd")(_c(xp), _c(k))


def depthwise_bwd(xp, k, g):
    return _impl("depthwise_bwd")(_c(xp), _c(k), _c(g).astype(xp.dtype, copy=False))


def resize_fwd(x, out_h, out_w):
    return _impl("resize_fwd")(_c(x), out_h, out_w)


def resize_bwd(g, in_h, in_w):
    return _impl("resize_bwd")(_c(g), in_h, in_w)


def sample_fwd(f, ys, xs):
    return _impl("sample_fwd")(_c(f), _c(np.asarray(ys, np.float64)), _c(np.asarray(xs, np.float64)))


def sample_bwd(g, shape, ys, xs):
    return _impl("sample_bwd")(_c(g), tuple(shape), _c(np.asarray(ys, np.float64)), _c(np.asarray(xs, np.float64)))

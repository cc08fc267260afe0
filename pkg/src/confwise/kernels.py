"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise (or when
``CONFWISE_PURE_PYTHON=1`` is set) the numpy versions take over. Both expose
``conv2d_forward``, ``conv2d_backward``, ``dilate`` and ``squared_edt``.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("CONFWISE_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

BACKENDS = {"python": _pykernels}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl


def conv2d_forward(x, w, b):
    """Same-padded stride-1 correlation. x [Cin,H,W], w [Cout,Cin,k,k], b [Cout]."""
    return _impl.conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b))


def conv2d_backward(x, w, gy, need_gx=True):
    """Return (grad_x, grad_w, grad_b) for :func:`conv2d_forward`; grad_x is None unless needed."""
    return _impl.conv2d_backward(
        np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gy), bool(need_gx)
    )


def dilate(mask, radius, cross=False):
    return _impl.dilate(np.ascontiguousarray(mask, dtype=np.uint8), int(radius), bool(cross))


def squared_edt(features):
    """Squared Euclidean distance from every pixel to the nearest nonzero pixel of ``features``.

    All-zero input gives ``inf`` everywhere.
    """
    return _impl.squared_edt(np.ascontiguousarray(features, dtype=np.uint8))

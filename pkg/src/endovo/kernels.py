"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy versions
take over.  Set ``ENDOVO_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from endovo import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ENDOVO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from endovo import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in x_shape), kh, kw, stride, pad)


def maxpool_forward(x, window, stride, pad):
    return _impl.maxpool_forward(_c(x), window, stride, pad)


def maxpool_backward(dout, argmax, h, w):
    return _impl.maxpool_backward(_c(dout), _c(argmax), h, w)


def backend_module(name):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _pykernels
    from endovo import _ckernels

    return _ckernels

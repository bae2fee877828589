"""Pure-numpy implementations of the hot loops.

Each function here has a compiled twin in ``_ckernels.pyx``.  Both accumulate
in the same order so results are bit-identical across backends.
"""
import numpy as np


def out_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        return -1
    return span // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N,C,H,W]`` into ``cols[C*kh*kw, N, Ho, Wo]``."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n, ho, wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to image layout."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[2], cols.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def maxpool_forward(x, window, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x
    best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.full((n, c, ho, wo), -1, dtype=np.int64)
    oy = np.arange(ho)[:, None] * stride - pad
    ox = np.arange(wo)[None, :] * stride - pad
    # row-major window scan with strict '>' keeps the lowest linear index on ties
    for di in range(window):
        for dj in range(window):
            v = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            upd = v > best
            best = np.where(upd, v, best)
            arg = np.where(upd, (oy + di) * w + (ox + dj), arg)
    return best, arg


def maxpool_backward(dout, argmax, h, w):
    n, c = dout.shape[:2]
    dx = np.zeros((n * c, h * w), dtype=dout.dtype)
    rows = np.broadcast_to(np.arange(n * c)[:, None], (n * c, argmax[0, 0].size))
    np.add.at(dx, (rows, argmax.reshape(n * c, -1)), dout.reshape(n * c, -1))
    return dx.reshape(n, c, h, w)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im / max-pool loops.

Loop orders mirror ``_pykernels`` so both backends accumulate identically.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest ox with ox*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t w, Py_ssize_t wo) nogil:
    # one past the largest ox with ox*stride + off < w
    cdef Py_ssize_t e
    if w - off <= 0:
        return 0
    e = (w - off - 1) // stride + 1
    return e if e < wo else wo


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c * kh * kw, n, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] cols = out
    cdef Py_ssize_t ci, i, j, b, oy, ox, row, iy, lo, hi
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    lo = _first_valid(j - pad, stride)
                    hi = _end_valid(j - pad, stride, w, wo)
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(lo, hi):
                                cols[row, b, oy, ox] = x[b, ci, iy, ox * stride + j - pad]
    return out


def col2im(real[:, :, :, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = cols.shape[2], wo = cols.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t ci, i, j, b, oy, ox, row, iy, lo, hi
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    lo = _first_valid(j - pad, stride)
                    hi = _end_valid(j - pad, stride, w, wo)
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(lo, hi):
                                dx[b, ci, iy, ox * stride + j - pad] += cols[row, b, oy, ox]
    return out


def maxpool_forward(real[:, :, :, ::1] x, int window, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - window) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - window) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] a = idx
    cdef Py_ssize_t b, ci, oy, ox, di, dj, iy, ix
    cdef long long best_i
    cdef real best, v
    cdef bint found
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        found = False
                        best = 0
                        best_i = -1
                        for di in range(window):
                            iy = oy * stride + di - pad
                            if iy < 0 or iy >= h:
                                continue
                            for dj in range(window):
                                ix = ox * stride + dj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                v = x[b, ci, iy, ix]
                                if not found or v > best:
                                    best = v
                                    best_i = iy * w + ix
                                    found = True
                        o[b, ci, oy, ox] = best
                        a[b, ci, oy, ox] = best_i
    return out, idx


def maxpool_backward(real[:, :, :, ::1] dout, long long[:, :, :, ::1] argmax, int h, int w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] dx = out
    cdef Py_ssize_t b, ci, oy, ox
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        dx[b, ci, argmax[b, ci, oy, ox]] += dout[b, ci, oy, ox]
    return out.reshape(n, c, h, w)

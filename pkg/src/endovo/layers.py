"""Differentiable layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects.  Image-like functions accept a
single ``[C, H, W]`` array or a batch ``[N, C, H, W]`` and return the same
rank they were given.
"""
from dataclasses import dataclass, field

import numpy as np

from endovo import kernels
from endovo.errors import ConfigurationError, DimensionError, NumericError


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)


def check_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values produced by {where}")
    return a


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_output_size(size, k, stride, pad):
    out = kernels._pykernels.out_size(size, k, stride, pad)
    if out < 1:
        raise ConfigurationError(
            f"kernel {k} with stride {stride} and pad {pad} does not tile an input of size {size}")
    return out


def _check_conv(x, kernels_, bias, stride, pad):
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} / pad={pad}")
    if kernels_.ndim != 4:
        raise DimensionError(f"kernels must be [K,C,kh,kw], got {kernels_.shape}")
    k, c, kh, kw = kernels_.shape
    if x.shape[1] != c:
        raise DimensionError(f"input has {x.shape[1]} channels, kernels expect {c}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"bias shape {bias.shape} does not match {k} kernels")
    h, w = x.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    return conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)


def conv2d_forward(x, kernels_, bias, stride=1, pad=0):
    """2-D cross-correlation (no kernel flip) plus per-output-channel bias."""
    xb, single = _batched(x)
    ho, wo = _check_conv(xb, kernels_, bias, stride, pad)
    k, c, kh, kw = kernels_.shape
    n = xb.shape[0]
    cols = kernels.im2col(xb, kh, kw, stride, pad)
    out = kernels_.reshape(k, -1) @ cols.reshape(c * kh * kw, -1)
    out = out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + bias.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d_forward")
    return out[0] if single else out


def conv2d_backward(x, kernels_, out_grad, stride=1, pad=0):
    xb, single = _batched(x)
    ho, wo = _check_conv(xb, kernels_, None, stride, pad)
    gb, _ = _batched(out_grad)
    k, c, kh, kw = kernels_.shape
    n = xb.shape[0]
    if gb.shape != (n, k, ho, wo):
        raise DimensionError(f"out_grad shape {gb.shape} != forward output {(n, k, ho, wo)}")
    cols = kernels.im2col(xb, kh, kw, stride, pad).reshape(c * kh * kw, -1)
    g2 = gb.transpose(1, 0, 2, 3).reshape(k, -1)
    dw = (g2 @ cols.T).reshape(kernels_.shape)
    db = g2.sum(axis=1)
    dcols = kernels_.reshape(k, -1).T @ g2
    dx = kernels.col2im(dcols.reshape(c * kh * kw, n, ho, wo), xb.shape, kh, kw, stride, pad)
    return LayerGrad(dx[0] if single else dx, {"kernels": dw, "bias": db})


def maxpool_forward(x, window, stride, pad=0):
    """Max-pool; returns ``(output, argmax)`` with argmax as flat ``H*W`` indices.

    Ties resolve to the lowest linear index.
    """
    xb, single = _batched(x)
    h, w = xb.shape[2:]
    if window < 1 or stride < 1 or pad < 0 or pad >= window:
        raise ConfigurationError(f"invalid pool window={window} stride={stride} pad={pad}")
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ConfigurationError(f"pool window {window} larger than padded input {h}x{w}")
    out, arg = kernels.maxpool_forward(xb, window, stride, pad)
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(out_grad, argmax, input_shape):
    gb, single = _batched(out_grad)
    ab = argmax[None] if single else argmax
    if ab.shape != gb.shape:
        raise DimensionError(f"argmax shape {ab.shape} != out_grad shape {gb.shape}")
    h, w = input_shape[-2:]
    dx = kernels.maxpool_backward(gb, ab.astype(np.int64, copy=False), h, w)
    return dx[0] if single else dx


def dense_forward(x, W, b):
    """``y = W x + b``; ``x`` may be ``[N]`` or a batch ``[B, N]``."""
    x = np.asarray(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"dense shapes x={x.shape} W={W.shape} b={b.shape} incompatible")
    y = x @ W.T + b
    return check_finite(y, "dense_forward")


def dense_backward(x, W, out_grad):
    x = np.asarray(x)
    g = np.asarray(out_grad)
    if g.shape[-1] != W.shape[0] or g.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"out_grad shape {g.shape} does not match dense output")
    dx = g @ W
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return LayerGrad(dx, {"W": g2.T @ x2, "b": g2.sum(axis=0)})


ACTIVATIONS = ("sigmoid", "tanh", "relu")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def nonlinearity(x, kind):
    x = np.asarray(x)
    if kind == "sigmoid":
        y = sigmoid(x)
    elif kind == "tanh":
        y = np.tanh(x)
    elif kind == "relu":
        y = np.maximum(x, 0)
    else:
        raise ConfigurationError(f"unknown nonlinearity {kind!r}")
    return check_finite(y, kind)


def nonlinearity_backward(y, out_grad, kind):
    """Backward pass written in terms of the forward *output* ``y``."""
    if kind == "sigmoid":
        return out_grad * y * (1 - y)
    if kind == "tanh":
        return out_grad * (1 - y * y)
    if kind == "relu":
        return out_grad * (y > 0)
    raise ConfigurationError(f"unknown nonlinearity {kind!r}")


def channel_concat(inputs):
    if not inputs:
        raise DimensionError("channel_concat needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise DimensionError(f"cannot concat shapes {ref} and {t.shape}")
    return np.concatenate(inputs, axis=-3)


def channel_split(out_grad, sizes):
    if sum(sizes) != out_grad.shape[-3]:
        raise DimensionError(f"split sizes {sizes} do not sum to {out_grad.shape[-3]} channels")
    return np.split(out_grad, np.cumsum(sizes)[:-1], axis=-3)


def dropout(x, rate, rng=None, mode="train"):
    """Inverted dropout.  Returns ``(y, mask)`` where ``y = x * mask``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ConfigurationError(f"unknown dropout mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return x * mask, mask


def dropout_backward(out_grad, mask):
    return out_grad * mask

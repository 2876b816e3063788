"""Neural-network operations on :class:`~cxrvit.tensor.Tensor`.

Convolution is im2col followed by a matmul, so its gradient path is the
im2col scatter plus the already-checked matmul backward.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import Tensor, _result, as_tensor, concat, matmul, mean, reshape, transpose


def im2col(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold NCHW input into (N, Ho*Wo, C*k*k) patch rows (channel-major inside a row)."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"non-positive conv output size {ho}x{wo} for input {h}x{w}, k={kernel}, s={stride}, p={padding}"
        )
    # patches are gathered from a channels-last view; the output row order is (c, ki, kj)
    xt = x.data.transpose(0, 2, 3, 1)
    if kernel == 1 and padding == 0:
        cols = xt[:, ::stride, ::stride, :].reshape(n, ho * wo, c)
    else:
        if padding:
            xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        win = sliding_window_view(xt, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.reshape(n, ho * wo, c * kernel * kernel)

    def fn(g):
        g = g.reshape(n, ho, wo, c, kernel, kernel)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, hp, wp, c))
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g[:, :, :, :, i, j]
        if padding:
            dxp = dxp[:, padding : padding + h, padding : padding + w, :]
        return (np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)),)

    return _result(np.ascontiguousarray(cols), (x,), fn, "im2col")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIkk ``weight``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {in_ch}")
    n, _, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = im2col(x, kh, stride, padding)
    wmat = transpose(reshape(weight, (out_ch, in_ch * kh * kw)), (1, 0))
    out = matmul(cols, wmat)
    if bias is not None:
        out = out + bias
    return reshape(transpose(out, (0, 2, 1)), (n, out_ch, ho, wo))


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d needs spatial dims divisible by {size}, got {h}x{w}")
    return mean(reshape(x, (n, c, h // size, size, w // size, size)), axis=(3, 5))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), fn, "log_softmax")


def standardize(x: Tensor, axes: tuple, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` (biased variance)."""
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def fn(g):
        g_mean = g.sum(axis=axes, keepdims=True) / count
        gy_mean = (g * out).sum(axis=axes, keepdims=True) / count
        return (inv * (g - g_mean - out * gy_mean),)

    return _result(out, (x,), fn, "standardize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    return standardize(x, (-1,), eps) * gain + bias


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"group_norm gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}")
    xg = x.data.reshape(n, groups, -1)
    count = xg.shape[2]
    centered = xg - xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=2, keepdims=True) + eps)
    z = (centered * inv).reshape(n, c, h, w)
    gv, bv = gain.data.reshape(1, c, 1, 1), bias.data.reshape(1, c, 1, 1)

    def fn(g):
        g_gain = (g * z).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        g_bias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gz = (g * gv).reshape(n, groups, -1)
            zg = z.reshape(n, groups, -1)
            gx = inv * (gz - gz.sum(axis=2, keepdims=True) / count - zg * ((gz * zg).sum(axis=2, keepdims=True) / count))
            gx = gx.reshape(n, c, h, w)
        return gx, g_gain, g_bias

    return _result(z * gv + bv, (x, gain, bias), fn, "group_norm")


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, H, W); running statistics updated in place when training."""
    c = x.shape[1]
    if training:
        batch_mean = x.data.mean(axis=(0, 2, 3))
        count = x.data.size // c
        batch_var = x.data.var(axis=(0, 2, 3)) * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var
        z = standardize(x, (0, 2, 3), eps)
    else:
        z = (x - running_mean.reshape(1, c, 1, 1)) * (1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps))
    return z * reshape(gain, (1, c, 1, 1)) + reshape(bias, (1, c, 1, 1))


def cross_entropy(logits: Tensor, targets: np.ndarray, class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean (optionally class-weighted) softmax cross-entropy over the batch."""
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[targets]
        onehot *= (w / w.sum())[:, None]
    else:
        onehot /= n
    return -(log_softmax(logits, -1) * onehot).sum()


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise stable binary cross-entropy on logits (no reduction)."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def fn(g):
        return (g * (special.expit(x) - t),)

    return _result(out, (logits,), fn, "bce")


__all__ = [
    "im2col",
    "conv2d",
    "avg_pool2d",
    "linear",
    "softmax",
    "log_softmax",
    "standardize",
    "layer_norm",
    "group_norm",
    "batch_norm",
    "cross_entropy",
    "bce_with_logits",
    "concat",
    "as_tensor",
]

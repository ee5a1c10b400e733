"""Differentiable layer primitives on N x C x H x W tensors.

Convolutions use a strided window view so that each kernel offset becomes
one tensordot; no explicit im2col buffer is materialised.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngState
from .tensor import Tensor, make_result


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} tensor, got shape {x.shape}")


def _same_pad(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        lo, hi = _same_pad(k)
        n = n + lo + hi
    elif padding != "valid":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if n < k:
        raise ShapeError(f"spatial extent {n} smaller than kernel {k}")
    return (n - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation.

    Parameters
    ----------
    x : N x C x H x W input.
    w : K x C x kh x kw kernels.
    b : length-K bias, optional.
    stride : step between output samples, >= 1.
    padding : ``"same"`` zero-pads by ``(k-1)//2`` before / ``k//2`` after;
        ``"valid"`` does not pad.
    """
    _check_rank(x, 4, "conv2d")
    _check_rank(w, 4, "conv2d")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: kernel expects {c2} input channels, input has {c} (input {x.shape}, kernels {w.shape})")
    if b is not None and b.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {k} kernels")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                        g, w.data[:, :, i, j], axes=([1], [0])
                    ).transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + h, pl:pl + wd]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, "conv2d", bw)


def conv_transpose_output_size(n: int, k: int, stride: int) -> int:
    return (n - 1) * stride + k


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution (scatter-add of each input pixel times the kernel).

    ``w`` is C_in x C_out x kh x kw; output extent is ``(H-1)*stride + kh``.
    The input gradient is a strided ``conv2d`` of the output gradient.
    """
    _check_rank(x, 4, "conv2d_transpose")
    _check_rank(w, 4, "conv2d_transpose")
    if stride < 1:
        raise ValueError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    c2, k, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d_transpose: kernel expects {c2} input channels, input has {c}")
    if b is not None and b.shape != (k,):
        raise ShapeError(f"conv2d_transpose: bias shape {b.shape} does not match {k} output channels")
    ho = conv_transpose_output_size(h, kh, stride)
    wo = conv_transpose_output_size(wd, kw, stride)
    out = np.zeros((n, k, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += np.tensordot(
                x.data, w.data[:, :, i, j], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        if x.requires_grad:
            gx = np.ascontiguousarray(np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, "conv2d_transpose", bw)


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None, pad_to_fit: bool = False) -> Tensor:
    """Non-overlapping max pooling.

    The gradient goes to the first (row-major) maximum of each window.
    Extents not divisible by the stride are rejected unless ``pad_to_fit``,
    which pads with -inf at the bottom/right.
    """
    _check_rank(x, 4, "maxpool2d")
    stride = window if stride is None else stride
    if stride != window:
        raise ValueError("maxpool2d: only window == stride is supported")
    n, c, h, wd = x.shape
    data = x.data
    if h % stride or wd % stride:
        if not pad_to_fit:
            raise ShapeError(f"maxpool2d: spatial dims {h}x{wd} not divisible by stride {stride}")
        ph, pw = -h % stride, -wd % stride
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    hp, wp = data.shape[2], data.shape[3]
    ho, wo = hp // stride, wp // stride
    blocks = data.reshape(n, c, ho, stride, wo, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, stride * stride)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, stride * stride), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gfull = gb.reshape(n, c, ho, wo, stride, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        return (np.ascontiguousarray(gfull[:, :, :h, :wd]),)

    return make_result(np.ascontiguousarray(out), (x,), "maxpool2d", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent: N x C x H x W -> N x C."""
    _check_rank(x, 4, "global_avg_pool")
    h, w = x.shape[2], x.shape[3]
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", bw)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape G x F."""
    _check_rank(x, 2, "dense")
    _check_rank(w, 2, "dense")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[1]} features, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match {w.shape[0]} outputs")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, "dense", bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics (biased variance) are used and the
    running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    _check_rank(x, 4, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (inv[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), "batchnorm2d", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so that exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), "softmax", bw)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngState] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngState")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    shapes = [t.shape for t in tensors]
    for s in shapes[1:]:
        if len(s) != len(shapes[0]) or any(a != b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != axis % len(s)):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([0] + [s[axis] for s in shapes])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), "concat", bw)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each N x C feature map by the matching entry of an N x C tensor."""
    _check_rank(x, 4, "scale_channels")
    _check_rank(s, 2, "scale_channels")
    if s.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: weights {s.shape} do not match feature maps {x.shape}")
    sv = s.data[:, :, None, None]

    def bw(g):
        return g * sv, (g * x.data).sum(axis=(2, 3))

    return make_result(x.data * sv, (x, s), "scale_channels", bw)

"""Stateful layers: parameter holders around the functional primitives."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import functional as F
from .rng import RngState
from .tensor import Tensor, default_dtype


def he_uniform(rng: RngState, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def parameter(values, decay: bool = False) -> Tensor:
    t = Tensor(np.asarray(values, dtype=default_dtype()), requires_grad=True)
    t.decay = decay
    return t


class Layer:
    """Base class.  ``params`` are trainable tensors; ``buffers`` are plain arrays."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, *xs: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def output_shape(self, *shapes: tuple) -> tuple:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = "same", rng: Optional[RngState] = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        w = he_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.params["weight"] = parameter(w, decay=True)
        self.params["bias"] = parameter(np.zeros(out_channels))

    def forward(self, x, training=False):
        return F.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def output_shape(self, shape):
        n, c, h, w = shape
        k = self.kernel_size
        return (n, self.out_channels, F.conv_output_size(h, k, self.stride, self.padding),
                F.conv_output_size(w, k, self.stride, self.padding))

    def describe(self):
        k = self.kernel_size
        return f"conv2d {k}x{k} {self.in_channels}->{self.out_channels}"


class ConvTranspose2D(Layer):
    kind = "conv2d_transpose"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 2, stride: int = 2,
                 rng: Optional[RngState] = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        # each output pixel sees in_channels * (k/stride)^2 inputs
        fan_in = max(1, in_channels * (kernel_size // stride) ** 2)
        w = he_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.params["weight"] = parameter(w, decay=True)
        self.params["bias"] = parameter(np.zeros(out_channels))

    def forward(self, x, training=False):
        return F.conv2d_transpose(x, self.params["weight"], self.params["bias"], self.stride)

    def output_shape(self, shape):
        n, c, h, w = shape
        k, s = self.kernel_size, self.stride
        return (n, self.out_channels, F.conv_transpose_output_size(h, k, s), F.conv_transpose_output_size(w, k, s))

    def describe(self):
        k = self.kernel_size
        return f"conv2d_transpose {k}x{k}/{self.stride} {self.in_channels}->{self.out_channels}"


class BatchNorm2D(Layer):
    """Batch normalisation with running statistics.

    Evaluating before any training batch has been seen raises unless
    ``identity_fallback`` is set, in which case the initial statistics
    (mean 0, variance 1) are used.
    """

    kind = "batchnorm2d"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, identity_fallback: bool = False):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.identity_fallback = identity_fallback
        self.params["gamma"] = parameter(np.ones(channels))
        self.params["beta"] = parameter(np.zeros(channels))
        dt = default_dtype()
        self.buffers["running_mean"] = np.zeros(channels, dtype=dt)
        self.buffers["running_var"] = np.ones(channels, dtype=dt)
        self.buffers["batches_seen"] = np.zeros(1, dtype=dt)

    def forward(self, x, training=False):
        if not training and self.buffers["batches_seen"][0] == 0 and not self.identity_fallback:
            raise RuntimeError("batchnorm2d: eval mode before any running statistics were recorded")
        if training:
            self.buffers["batches_seen"] += 1
        return F.batchnorm2d(x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                             self.buffers["running_var"], training, self.momentum, self.eps)

    def output_shape(self, shape):
        return shape

    def describe(self):
        return f"batchnorm2d {self.channels}"


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        self.fn = fn

    def forward(self, x, training=False):
        return F.activation(x, self.fn)

    def output_shape(self, shape):
        return shape

    def describe(self):
        return self.fn


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, window: int = 2, pad_to_fit: bool = False):
        super().__init__()
        self.window, self.pad_to_fit = window, pad_to_fit

    def forward(self, x, training=False):
        return F.maxpool2d(x, self.window, pad_to_fit=self.pad_to_fit)

    def output_shape(self, shape):
        n, c, h, w = shape
        s = self.window
        if (h % s or w % s) and not self.pad_to_fit:
            raise F.ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {s}")
        return (n, c, -(-h // s), -(-w // s))

    def describe(self):
        return f"maxpool2d {self.window}x{self.window}"


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        return F.flatten(x)

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[RngState] = None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        shape = (out_features, in_features)
        w = he_uniform(rng, shape, in_features) if rng is not None else np.zeros(shape)
        self.params["weight"] = parameter(w, decay=True)
        self.params["bias"] = parameter(np.zeros(out_features))

    def forward(self, x, training=False):
        return F.dense(x, self.params["weight"], self.params["bias"])

    def output_shape(self, shape):
        return (shape[0], self.out_features)

    def describe(self):
        return f"dense {self.in_features}->{self.out_features}"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, rng: Optional[RngState] = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, training=False):
        return F.dropout(x, self.rate, training, self.rng)

    def output_shape(self, shape):
        return shape

    def describe(self):
        return f"dropout {self.rate:g}"


class Concat(Layer):
    kind = "concat"

    def forward(self, *xs, training=False):
        return F.concat(list(xs), axis=1)

    def output_shape(self, *shapes):
        first = shapes[0]
        for s in shapes[1:]:
            if s[0] != first[0] or s[2:] != first[2:]:
                raise F.ShapeError(f"concat: skip shapes {shapes} do not match")
        return (first[0], sum(s[1] for s in shapes)) + tuple(first[2:])


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        return F.softmax(x)

    def output_shape(self, shape):
        return shape


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x, training=False):
        return F.global_avg_pool(x)

    def output_shape(self, shape):
        return shape[:2]

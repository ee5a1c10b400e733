"""Squeeze-and-excitation channel attention.

The block squeezes each feature map to its spatial mean, passes the
resulting channel descriptor through a bias-free bottleneck
(C -> C/r -> C, ReLU then sigmoid) and rescales every channel by its
attention weight.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .layers import Layer, he_uniform, parameter
from .rng import RngState
from .tensor import Tensor


class SEBlock(Layer):
    """Channel attention with reduction ratio ``r``.

    The bottleneck width is ``max(1, channels // reduction_ratio)``; it is
    stored as ``hidden`` so that checkpoints and reports carry the value
    actually used.  Setting ``force_identity`` pins every attention weight
    to 1, which turns the block into an exact identity.
    """

    kind = "se"

    def __init__(self, channels: int, reduction_ratio: int = 16, rng: Optional[RngState] = None):
        super().__init__()
        if channels < 1 or reduction_ratio < 1:
            raise ValueError("channels and reduction_ratio must be positive")
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        self.hidden = max(1, channels // reduction_ratio)
        self.force_identity = False
        if rng is not None:
            w1 = he_uniform(rng, (self.hidden, channels), channels)
            w2 = he_uniform(rng, (channels, self.hidden), self.hidden)
        else:
            w1 = np.zeros((self.hidden, channels))
            w2 = np.zeros((channels, self.hidden))
        self.params["w1"] = parameter(w1, decay=True)
        self.params["w2"] = parameter(w2, decay=True)

    @property
    def w1(self) -> Tensor:
        return self.params["w1"]

    @property
    def w2(self) -> Tensor:
        return self.params["w2"]

    def forward(self, x, training=False):
        return se_forward(x, self)

    def output_shape(self, shape):
        return shape

    def describe(self):
        return f"se {self.channels}/{self.reduction_ratio} (hidden {self.hidden})"


def squeeze(x: Tensor) -> Tensor:
    """Per-channel spatial mean, N x C x H x W -> N x C."""
    return F.global_avg_pool(x)


def excite(z: Tensor, block: SEBlock) -> Tensor:
    """Attention weights ``sigmoid(W2 relu(W1 z))``, each strictly in (0, 1)."""
    if z.ndim != 2 or z.shape[1] != block.channels:
        raise F.ShapeError(f"excite: descriptor shape {z.shape} does not match block with {block.channels} channels")
    hidden = F.relu(F.dense(z, block.w1))
    return F.sigmoid(F.dense(hidden, block.w2))


def recalibrate(x: Tensor, s: Tensor) -> Tensor:
    """Scale channel c of every feature map by ``s[:, c]``."""
    return F.scale_channels(x, s)


def se_forward(x: Tensor, block: SEBlock) -> Tensor:
    if block.force_identity:
        s = Tensor(np.ones(x.shape[:2], dtype=x.dtype))
    else:
        s = excite(squeeze(x), block)
    return recalibrate(x, s)

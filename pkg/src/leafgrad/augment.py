"""Label-preserving flips and right-angle rotations for C x H x W arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import RngState


@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotations: tuple = (0, 90, 180, 270)
    paired: bool = True

    def validate(self) -> None:
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability must be in [0, 1], got {p}")
        bad = [r for r in self.rotations if r not in (0, 90, 180, 270)]
        if bad or not self.rotations:
            raise ValueError(f"rotations must be a non-empty subset of 0/90/180/270, got {self.rotations}")


def sample_transform(cfg: AugmentConfig, rng: RngState, square: bool = True) -> tuple[bool, bool, int]:
    # all three draws happen unconditionally so the stream stays aligned
    u = rng.random(3)
    hflip = bool(u[0] < cfg.hflip_p)
    vflip = bool(u[1] < cfg.vflip_p)
    rots = [r for r in cfg.rotations if square or r % 180 == 0] or [0]
    rot = rots[min(int(u[2] * len(rots)), len(rots) - 1)]
    return hflip, vflip, rot


def apply_transform(a: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    """Horizontal flip, then vertical flip, then counter-clockwise rotation by ``rot`` degrees."""
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    if rot:
        a = np.rot90(a, k=rot // 90, axes=(-2, -1))
    return np.ascontiguousarray(a)


def augment(img: np.ndarray, mask: Optional[np.ndarray], cfg: AugmentConfig, rng: RngState):
    """Return ``(img', mask')``; in paired mode the mask gets the image's transform."""
    if not cfg.enabled:
        return img, mask
    cfg.validate()
    square = img.shape[-1] == img.shape[-2]
    t = sample_transform(cfg, rng, square)
    out = apply_transform(img, *t)
    if mask is None:
        return out, None
    return out, (apply_transform(mask, *t) if cfg.paired else mask)

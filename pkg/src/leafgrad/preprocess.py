"""Image preprocessing stages: resize, Laplacian edges, CLAHE, and mid-point normalisation.

Stages operate on :class:`ImageU8` and are chained by :func:`run_pipeline`,
which always returns floats: mid-point normalised values when the chain
ends with ``mpn``, otherwise pixels scaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .imageio import ImageF, ImageU8

LUMA = np.array([0.299, 0.587, 0.114])

LAPLACIAN_4 = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.int64)
LAPLACIAN_8 = np.array([[1, 1, 1], [1, -8, 1], [1, 1, 1]], dtype=np.int64)


def _round_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _bilinear_axes(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear(values: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resampling of an H x W (x C) float array."""
    y0, y1, wy = _bilinear_axes(values.shape[0], h)
    x0, x1, wx = _bilinear_axes(values.shape[1], w)
    v = values.astype(np.float64)
    if v.ndim == 3:
        wy, wx = wy[:, None, None], wx[None, :, None]
    else:
        wy, wx = wy[:, None], wx[None, :]
    top = v[y0][:, x0] * (1 - wx) + v[y0][:, x1] * wx
    bot = v[y1][:, x0] * (1 - wx) + v[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: ImageU8, h: int, w: int) -> ImageU8:
    """Stretch to h x w with half-pixel-centre bilinear interpolation."""
    if h < 1 or w < 1:
        raise ValueError(f"resize target must be positive, got {h}x{w}")
    if (h, w) == (img.height, img.width):
        return ImageU8(img.pixels.copy())
    return ImageU8(_round_u8(bilinear(img.pixels, h, w)))


def laplacian_edge(img: ImageU8, neighbors: int = 4) -> ImageU8:
    """|Laplacian| per channel with replicated borders, clamped to [0, 255]."""
    kernel = {4: LAPLACIAN_4, 8: LAPLACIAN_8}.get(neighbors)
    if kernel is None:
        raise ValueError(f"laplacian variant must be 4 or 8, got {neighbors}")
    p = np.pad(img.pixels.astype(np.int64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.height, img.width
    acc = np.zeros((h, w, img.channels), dtype=np.int64)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                acc += kernel[i, j] * p[i:i + h, j:j + w]
    return ImageU8(np.clip(np.abs(acc), 0, 255).astype(np.uint8))


def clip_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip a 256-bin histogram and spread the excess uniformly.

    The per-bin ceiling is ``clip_limit * total / 256`` (at least 1).  The
    excess is split as evenly as integers allow; leftover counts go to
    evenly spaced bins, so the total is conserved exactly.
    """
    hist = np.asarray(hist, dtype=np.int64)
    total = int(hist.sum())
    ceiling = max(1, int(clip_limit * total / 256))
    excess = int(np.maximum(hist - ceiling, 0).sum())
    out = np.minimum(hist, ceiling)
    out += excess // 256
    rem = excess % 256
    if rem:
        out[(np.arange(rem) * 256) // rem] += 1
    return out


def equalization_lut(hist: np.ndarray) -> np.ndarray:
    """``round(255 * (cdf - cdf_min) / (total - cdf_min))``; identity when degenerate."""
    hist = np.asarray(hist, dtype=np.int64)
    total = int(hist.sum())
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[np.flatnonzero(hist)[0]]) if total else 0
    if total == cdf_min:
        return np.arange(256, dtype=np.float64)
    return np.clip(np.floor((cdf - cdf_min) * 255.0 / (total - cdf_min) + 0.5), 0, 255)


def _tile_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256)
    if np.count_nonzero(hist) <= 1:
        # a uniform tile has no contrast to redistribute
        return np.arange(256, dtype=np.float64)
    return equalization_lut(clip_histogram(hist, clip_limit))


def _tile_weights(n: int, bounds: np.ndarray):
    centres = (bounds[:-1] + bounds[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    t = len(centres)
    i0 = np.clip(np.searchsorted(centres, pos, side="right") - 1, 0, t - 1)
    i1 = np.minimum(i0 + 1, t - 1)
    span = centres[i1] - centres[i0]
    wgt = np.where(span > 0, (pos - centres[i0]) / np.where(span > 0, span, 1), 0.0)
    return i0, i1, np.clip(wgt, 0.0, 1.0)


def clahe_gray(gray: np.ndarray, clip_limit: float = 2.0, tile_grid=(8, 8)) -> np.ndarray:
    """CLAHE on a 2-D uint8 array."""
    if clip_limit <= 0:
        raise ValueError(f"clip_limit must be positive, got {clip_limit}")
    gy, gx = tile_grid
    if gy < 1 or gx < 1:
        raise ValueError(f"tile grid must be at least 1x1, got {tile_grid}")
    h, w = gray.shape
    ys = np.round(np.linspace(0, h, gy + 1)).astype(np.int64)
    xs = np.round(np.linspace(0, w, gx + 1)).astype(np.int64)
    if np.any(np.diff(ys) < 1) or np.any(np.diff(xs) < 1):
        raise ValueError(f"tile grid {gy}x{gx} too fine for a {h}x{w} image (tiles under one pixel)")
    luts = np.empty((gy, gx, 256))
    for i in range(gy):
        for j in range(gx):
            luts[i, j] = _tile_lut(gray[ys[i]:ys[i + 1], xs[j]:xs[j + 1]], clip_limit)
    r0, r1, wy = _tile_weights(h, ys)
    c0, c1, wx = _tile_weights(w, xs)
    wy, wx = wy[:, None], wx[None, :]
    g = gray.astype(np.int64)
    m00 = luts[r0[:, None], c0[None, :], g]
    m01 = luts[r0[:, None], c1[None, :], g]
    m10 = luts[r1[:, None], c0[None, :], g]
    m11 = luts[r1[:, None], c1[None, :], g]
    out = (1 - wy) * ((1 - wx) * m00 + wx * m01) + wy * ((1 - wx) * m10 + wx * m11)
    return _round_u8(out)


def clahe(img: ImageU8, clip_limit: float = 2.0, tile_grid=(8, 8)) -> ImageU8:
    """Contrast-limited adaptive histogram equalisation.

    Colour images are equalised on their luma; each RGB pixel is then scaled
    by the ratio of new to old luma, which keeps hue fixed.
    """
    if img.channels == 1:
        return ImageU8(clahe_gray(img.pixels[:, :, 0], clip_limit, tile_grid)[:, :, None])
    rgb = img.pixels.astype(np.float64)
    luma = _round_u8(rgb @ LUMA)
    new = clahe_gray(luma, clip_limit, tile_grid).astype(np.float64)
    old = luma.astype(np.float64)
    ratio = np.divide(new, old, out=np.ones_like(new), where=old > 0)
    out = rgb * ratio[:, :, None]
    dark = old == 0
    out[dark] = rgb[dark] + new[dark][:, None]
    return ImageU8(_round_u8(out))


def mpn(img: ImageU8) -> ImageF:
    """Mid-point normalisation ``tanh(p / 127.5 - 1)``.

    The codomain is [-tanh(1), tanh(1)], roughly +/-0.7616, with 127.5 at 0.
    """
    return ImageF(np.tanh(img.pixels.astype(np.float64) / 127.5 - 1.0))


# -- pipeline ------------------------------------------------------------

@dataclass(frozen=True)
class Resize:
    height: int = 224
    width: int = 224


@dataclass(frozen=True)
class Edge:
    neighbors: int = 4


@dataclass(frozen=True)
class Clahe:
    clip_limit: float = 2.0
    tile_grid: tuple = (8, 8)


@dataclass(frozen=True)
class Mpn:
    pass


Stage = Union[Resize, Edge, Clahe, Mpn]
STAGE_NAMES = ("resize", "edge", "clahe", "mpn")


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    stages: list = field(default_factory=lambda: [Resize(), Mpn()])
    target_size: tuple = (224, 224)

    def validate(self) -> None:
        if sum(isinstance(s, Resize) for s in self.stages) > 1:
            raise PipelineError("a pipeline may contain at most one resize stage")
        for i, s in enumerate(self.stages):
            if isinstance(s, Mpn) and i != len(self.stages) - 1:
                raise PipelineError("mpn must be the final stage")
            if not isinstance(s, (Resize, Edge, Clahe, Mpn)):
                raise PipelineError(f"unknown stage {s!r}")

    @property
    def name(self) -> str:
        return ",".join(type(s).__name__.lower() for s in self.stages)


def parse_pipeline(spec: str, size=224, clip_limit: float = 2.0, tile_grid=(8, 8), laplacian: int = 4,
                   ensure_resize: bool = False) -> PipelineConfig:
    """Build a config from a comma list such as ``"resize,clahe,mpn"``.

    With ``ensure_resize`` a missing resize stage is prepended, so the
    shorthand ``"mpn"`` means resize followed by mpn.
    """
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    stages = []
    for tok in (t.strip().lower() for t in spec.split(",") if t.strip()):
        if tok == "resize":
            stages.append(Resize(h, w))
        elif tok == "edge":
            stages.append(Edge(laplacian))
        elif tok == "clahe":
            stages.append(Clahe(clip_limit, tuple(tile_grid)))
        elif tok == "mpn":
            stages.append(Mpn())
        else:
            raise PipelineError(f"unknown pipeline stage {tok!r}; expected one of {STAGE_NAMES}")
    if ensure_resize and not any(isinstance(s, Resize) for s in stages):
        stages.insert(0, Resize(h, w))
    cfg = PipelineConfig(stages, (h, w))
    cfg.validate()
    return cfg


def run_pipeline(img: ImageU8, cfg: PipelineConfig) -> ImageF:
    cfg.validate()
    for stage in cfg.stages:
        if isinstance(stage, Resize):
            img = resize_bilinear(img, stage.height, stage.width)
        elif isinstance(stage, Edge):
            img = laplacian_edge(img, stage.neighbors)
        elif isinstance(stage, Clahe):
            img = clahe(img, stage.clip_limit, stage.tile_grid)
        elif isinstance(stage, Mpn):
            return mpn(img)
    return ImageF(img.pixels.astype(np.float64) / 255.0)

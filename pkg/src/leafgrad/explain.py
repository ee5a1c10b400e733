"""GradCAM++ heatmaps for classification graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import ImageU8
from .layers import Softmax
from .models import ModelGraph
from .preprocess import bilinear
from .tensor import Tensor, backward, get_tape, take_columns


@dataclass
class Heatmap:
    """H x W saliency in [0, 1], aligned with the model input."""

    values: np.ndarray
    layer: str
    target_class: int


def _score_node(model: ModelGraph) -> str:
    last = model.nodes[-1]
    if isinstance(last.layer, Softmax):
        return last.inputs[0]
    return last.name


def gradcam_pp_weights(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Channel weights from first-order gradients of an exponentiated class score.

    For ``Y = exp(S)`` the second and third derivatives reduce to powers of
    ``dS/dA``, giving ``alpha = g^2 / (2 g^2 + sum(A) g^3)`` and
    ``w_k = sum_ij alpha_kij * relu(g_kij)``.
    """
    g2 = grads ** 2
    g3 = g2 * grads
    denom = 2.0 * g2 + acts.sum(axis=(1, 2), keepdims=True) * g3
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def _normalize(cam: np.ndarray) -> np.ndarray:
    hi, lo = cam.max(), cam.min()
    if hi <= 0:
        return np.zeros_like(cam)
    if hi == lo:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam_pp(model: ModelGraph, image, target_class: int, layer: str = None) -> Heatmap:
    """Saliency of ``target_class`` for one C x H x W image at a feature-map layer.

    ``layer`` defaults to the model's last convolutional stage.  The class
    score is the pre-softmax logit.
    """
    layer = layer or model.cam_layer
    names = {n.name for n in model.nodes}
    if layer not in names:
        raise KeyError(f"unknown layer {layer!r}")
    shapes = {name: shape for name, _, shape in model.trace_shapes()}
    if len(shapes[layer]) != 4:
        raise ValueError(f"layer {layer!r} is not convolutional (output shape {shapes[layer]})")
    score_name = _score_node(model)
    if len(shapes[score_name]) != 2:
        raise ValueError(f"model {model.kind!r} has no class-score output")
    k = shapes[score_name][1]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")

    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3:
        x = x[None]
    get_tape().reset()
    taps = {layer: None, score_name: None}
    model.forward(Tensor(x.astype(model.dtype)), training=False, taps=taps)
    acts = taps[layer].retain_grad()
    score = take_columns(taps[score_name], np.array([target_class])).sum()
    backward(score)
    grads = acts.grad[0].astype(np.float64) if acts.grad is not None else np.zeros(acts.shape[1:])
    model.zero_grad()

    a = acts.data[0].astype(np.float64)
    weights = gradcam_pp_weights(a, grads)
    cam = np.maximum((weights[:, None, None] * a).sum(axis=0), 0.0)
    cam = bilinear(cam, x.shape[2], x.shape[3])
    return Heatmap(np.clip(_normalize(cam), 0.0, 1.0), layer, target_class)


def jet(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to an RGB jet-like palette, returned as floats in [0, 255]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b], axis=-1) * 255.0


def overlay(image: ImageU8, heat: Heatmap, alpha: float = 0.5) -> ImageU8:
    """Alpha-blend the coloured heatmap onto the image."""
    base = image.pixels.astype(np.float64)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    hm = heat.values
    if hm.shape != base.shape[:2]:
        hm = bilinear(hm, base.shape[0], base.shape[1])
    out = (1 - alpha) * base + alpha * jet(hm)
    return ImageU8(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def heatmap_image(heat: Heatmap) -> ImageU8:
    return ImageU8(np.clip(np.floor(heat.values * 255 + 0.5), 0, 255).astype(np.uint8))

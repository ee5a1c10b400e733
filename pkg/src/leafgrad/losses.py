"""Classification and segmentation losses."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, clip, log, take_columns

PROB_EPS = 1e-7
OVERLAP_EPS = 1e-6


def l2_penalty(model, l2: float) -> Optional[Tensor]:
    """``l2 * sum ||W||^2`` over weight tensors (biases and BN affine excluded)."""
    if model is None or l2 == 0:
        return None
    total = None
    for p in model.parameters():
        if p.decay:
            sq = (p * p).sum()
            total = sq if total is None else total + sq
    return None if total is None else total * l2


def _with_penalty(loss: Tensor, model, l2: float) -> Tensor:
    if l2 < 0:
        raise ValueError(f"l2 coefficient must be >= 0, got {l2}")
    pen = l2_penalty(model, l2)
    return loss if pen is None else loss + pen


def cross_entropy_loss(probs: Tensor, labels, model=None, l2: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of the true class, plus the L2 term.

    Probabilities are clamped to ``[1e-7, 1]`` before the log.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = clip(take_columns(probs, labels), PROB_EPS, 1.0)
    nll = -(log(picked).mean())
    return _with_penalty(nll, model, l2)


def _as_tensor(t, like: Tensor) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=like.dtype))


def _overlap_terms(pred: Tensor, target: Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    return inter, pred.sum(axis=axes), target.sum(axis=axes)


def dice_coeff(pred: Tensor, target, eps: float = OVERLAP_EPS) -> Tensor:
    """Soft Dice ``(2 sum(p t) + eps) / (sum p + sum t + eps)``, averaged over the batch."""
    target = _as_tensor(target, pred)
    inter, sp, st = _overlap_terms(pred, target)
    return ((inter * 2.0 + eps) / (sp + st + eps)).mean()


def iou_coeff(pred: Tensor, target, eps: float = OVERLAP_EPS) -> Tensor:
    """Soft IoU ``(sum(p t) + eps) / (sum p + sum t - sum(p t) + eps)``, batch mean."""
    target = _as_tensor(target, pred)
    inter, sp, st = _overlap_terms(pred, target)
    return ((inter + eps) / (sp + st - inter + eps)).mean()


def combined_seg_loss(logits: Tensor, target, model=None, l2: float = 0.0, from_logits: bool = True) -> Tensor:
    """``0.5 (1 - dice) + 0.5 (1 - iou)`` on sigmoid probabilities, plus the L2 term."""
    probs = F.sigmoid(logits) if from_logits else logits
    target = _as_tensor(target, probs)
    loss = (1.0 - dice_coeff(probs, target)) * 0.5 + (1.0 - iou_coeff(probs, target)) * 0.5
    return _with_penalty(loss, model, l2)

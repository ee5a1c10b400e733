"""Confusion matrices, per-class precision/recall/F1, and mask overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import OVERLAP_EPS


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, k: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} out of range [0, {k}): {v.min()}..{v.max()}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    zero_division: list = field(default_factory=list)  # (class, metric) pairs set to 0 by convention

    def rows(self, class_names=None):
        k = len(self.precision)
        names = class_names or [str(i) for i in range(k)]
        for c in range(k):
            yield names[c], float(self.precision[c]), float(self.recall[c]), float(self.f1[c]), int(self.support[c])


def _safe_div(num: np.ndarray, den: np.ndarray):
    ok = den > 0
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=ok), ~ok


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class precision/recall/F1 and macro averages.

    A zero denominator yields 0 and is listed in ``zero_division``.
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise ValueError("class_metrics needs a non-empty confusion matrix")
    tp = np.diag(counts)
    precision, p0 = _safe_div(tp, counts.sum(axis=0))
    recall, r0 = _safe_div(tp, counts.sum(axis=1))
    f1, f0 = _safe_div(2 * precision * recall, precision + recall)
    zero = [(int(c), "precision") for c in np.flatnonzero(p0)]
    zero += [(int(c), "recall") for c in np.flatnonzero(r0)]
    zero += [(int(c), "f1") for c in np.flatnonzero(f0)]
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        support=cm.counts.sum(axis=1),
        accuracy=float(tp.sum() / counts.sum()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        zero_division=zero,
    )


def mask_overlap(pred: np.ndarray, target: np.ndarray, eps: float = OVERLAP_EPS):
    """Per-sample (iou, dice) for hard or soft masks shaped N x ..."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    sp, st = pred.sum(axis=axes), target.sum(axis=axes)
    iou = (inter + eps) / (sp + st - inter + eps)
    dice = (2 * inter + eps) / (sp + st + eps)
    return iou, dice


def seg_metrics(pred_masks, target_masks, threshold: float = 0.5) -> dict:
    """Threshold predicted probabilities, then dataset-mean IoU and Dice."""
    pred = (np.asarray(pred_masks) > threshold).astype(np.float64)
    iou, dice = mask_overlap(pred, np.asarray(target_masks))
    return {"iou": float(iou.mean()), "dice": float(dice.mean()), "per_sample_iou": iou, "per_sample_dice": dice}

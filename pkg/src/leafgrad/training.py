"""Classification and segmentation training loops.

Both loops share one structure: seeded shuffling into minibatches, optional
augmentation, Adam updates, then per-epoch evaluation feeding the
plateau schedule and early stopping.  The best weights (lowest validation
loss) are restored when training ends.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugmentConfig, augment
from .functional import sigmoid
from .imageio import atomic_write
from .losses import combined_seg_loss, cross_entropy_loss
from .metrics import class_metrics, confusion, seg_metrics
from .models import ModelGraph, forward_classify, forward_segment
from .optim import AdamState, EarlyStop, PlateauSchedule, adam_step, early_stop_step, plateau_step, restore_best
from .rng import RngState
from .tensor import Tensor, backward, get_tape, no_grad


@dataclass
class ArrayDataset:
    """Images as N x C x H x W floats; ``y`` holds int labels or N x 1 x H x W masks."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} images but {len(self.y)} targets")

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class DataSplits:
    train: ArrayDataset
    val: Optional[ArrayDataset] = None
    test: Optional[ArrayDataset] = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    l2: Optional[float] = None  # None: use the model's l2_coeff
    plateau_factor: float = 0.5
    plateau_patience: int = 15
    min_lr: float = 0.0
    early_stop_patience: Optional[int] = 15
    augment: Optional[AugmentConfig] = None
    seed: int = 0
    target_train_metric: Optional[float] = None
    threshold: float = 0.5
    checkpoint_path: Optional[str] = None
    checkpoint_run: Optional[dict] = None  # run-config echo stored in the checkpoint


@dataclass
class TrainReport:
    task: str
    history: list = field(default_factory=list)
    lr_events: list = field(default_factory=list)
    stopped_epoch: Optional[int] = None
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    final: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def columns(self) -> list[str]:
        if self.task == "classify":
            return ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]
        return ["epoch", "lr", "train_loss", "train_dice", "train_iou", "val_loss", "val_dice", "val_iou"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns + ["config_hash"])
        for row in self.history:
            w.writerow([_fmt(row.get(c)) for c in self.columns] + [self.config_hash])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write(path, self.to_csv().encode("utf-8"))

    def summary(self) -> dict:
        return {
            "task": self.task,
            "epochs_run": len(self.history),
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "lr_events": self.lr_events,
            "final": self.final,
            "config_hash": self.config_hash,
        }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _batches(n: int, batch_size: int, rng: RngState):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _augment_batch(x, y, cfg: Optional[AugmentConfig], rng: RngState, with_mask: bool):
    if cfg is None or not cfg.enabled:
        return x, y
    xs, ys = [], []
    for i in range(len(x)):
        xi, yi = augment(x[i], y[i] if with_mask else None, cfg, rng)
        xs.append(xi)
        ys.append(yi if with_mask else y[i])
    return np.stack(xs), np.stack(ys) if with_mask else np.asarray(ys)


def _eval_classifier(model: ModelGraph, data: ArrayDataset, l2: float, batch_size: int):
    probs = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            probs.append(forward_classify(model, Tensor(data.x[i:i + batch_size].astype(model.dtype))).data)
        p = np.concatenate(probs)
        loss = cross_entropy_loss(Tensor(p), data.y, model, l2).item()
    return loss, p


def _eval_segmenter(model: ModelGraph, data: ArrayDataset, l2: float, batch_size: int):
    logits = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            logits.append(forward_segment(model, Tensor(data.x[i:i + batch_size].astype(model.dtype))).data)
        z = Tensor(np.concatenate(logits))
        loss = combined_seg_loss(z, data.y.astype(model.dtype), model, l2).item()
        probs = sigmoid(z).data
    return loss, probs


def evaluate_classifier(model: ModelGraph, data: ArrayDataset, l2: Optional[float] = None, batch_size: int = 16) -> dict:
    l2 = model.config.get("l2_coeff", 0.0) if l2 is None else l2
    loss, p = _eval_classifier(model, data, l2, batch_size)
    cm = confusion(p.argmax(axis=1), data.y, p.shape[1])
    return {"loss": loss, "confusion": cm, "metrics": class_metrics(cm), "probs": p}


def evaluate_segmenter(model: ModelGraph, data: ArrayDataset, l2: Optional[float] = None, batch_size: int = 16,
                       threshold: float = 0.5) -> dict:
    l2 = model.config.get("l2_coeff", 0.0) if l2 is None else l2
    loss, probs = _eval_segmenter(model, data, l2, batch_size)
    m = seg_metrics(probs, data.y, threshold)
    return {"loss": loss, "iou": m["iou"], "dice": m["dice"], "probs": probs,
            "per_sample_iou": m["per_sample_iou"], "per_sample_dice": m["per_sample_dice"]}


def _train(model: ModelGraph, splits: DataSplits, cfg: TrainConfig, task: str) -> TrainReport:
    if len(splits.train) == 0:
        raise ValueError("training split is empty")
    for name in ("val", "test"):
        part = getattr(splits, name)
        if part is not None and len(part) == 0:
            raise ValueError(f"{name} split is empty")
    seg = task == "segment"
    if seg:
        want = (len(splits.train), 1) + model.input_shape[1:]
        if splits.train.y.shape != want:
            raise ValueError(f"mask shape {splits.train.y.shape} does not match images (expected {want})")
    else:
        k = model.config["classes"]
        for part in (splits.train, splits.val, splits.test):
            if part is not None and len(part) and (part.y.min() < 0 or part.y.max() >= k):
                raise ValueError(f"labels outside [0, {k}) for a {k}-class model")

    l2 = model.config.get("l2_coeff", 0.0) if cfg.l2 is None else cfg.l2
    root = RngState(cfg.seed)
    shuffle_rng, aug_rng = root.child("shuffle"), root.child("augment")
    params = model.parameters()
    adam = AdamState(lr=cfg.lr)
    sched = PlateauSchedule(lr=cfg.lr, factor=cfg.plateau_factor, patience=cfg.plateau_patience,
                            mode="min" if seg else "max", min_lr=cfg.min_lr)
    stopper = EarlyStop(patience=cfg.early_stop_patience or 0, mode="min")
    report = TrainReport(task=task, config_hash=model.config_hash())
    evaluate = _eval_segmenter if seg else _eval_classifier
    monitor = splits.val if splits.val is not None else splits.train

    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(splits.train), cfg.batch_size, shuffle_rng):
            xb, yb = _augment_batch(splits.train.x[idx], splits.train.y[idx], cfg.augment, aug_rng, seg)
            get_tape().reset()
            model.zero_grad()
            xt = Tensor(xb.astype(model.dtype))
            if seg:
                loss = combined_seg_loss(forward_segment(model, xt, training=True), yb.astype(model.dtype), model, l2)
            else:
                loss = cross_entropy_loss(forward_classify(model, xt, training=True), yb, model, l2)
            backward(loss)
            adam_step(params, None, adam)

        row = {"epoch": epoch, "lr": adam.lr}
        tr_loss, tr_out = evaluate(model, splits.train, l2, cfg.batch_size)
        row["train_loss"] = tr_loss
        if seg:
            m = seg_metrics(tr_out, splits.train.y, cfg.threshold)
            row["train_dice"], row["train_iou"] = m["dice"], m["iou"]
            train_metric = m["dice"]
        else:
            train_metric = float(np.mean(tr_out.argmax(axis=1) == splits.train.y))
            row["train_acc"] = train_metric
        if splits.val is not None:
            va_loss, va_out = evaluate(model, splits.val, l2, cfg.batch_size)
            row["val_loss"] = va_loss
            if seg:
                m = seg_metrics(va_out, splits.val.y, cfg.threshold)
                row["val_dice"], row["val_iou"] = m["dice"], m["iou"]
            else:
                row["val_acc"] = float(np.mean(va_out.argmax(axis=1) == splits.val.y))
        report.history.append(row)

        mon_loss = row.get("val_loss", row["train_loss"])
        if seg:
            sched_metric = mon_loss
        else:
            sched_metric = row.get("val_acc", row["train_acc"])
        old_lr = adam.lr
        adam.lr = plateau_step(sched, sched_metric)
        if adam.lr != old_lr:
            report.lr_events.append({"epoch": epoch, "old_lr": old_lr, "new_lr": adam.lr})

        verdict = early_stop_step(stopper, mon_loss, model)
        if stopper.best_epoch == epoch and cfg.checkpoint_path:
            from .checkpoint import save_checkpoint
            save_checkpoint(model, cfg.checkpoint_path, cfg.seed, cfg.checkpoint_run)
        if cfg.early_stop_patience and verdict == "stop":
            report.stopped_epoch = epoch
            break
        if cfg.target_train_metric is not None and train_metric >= cfg.target_train_metric:
            break

    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    if cfg.early_stop_patience:
        restore_best(stopper, model)

    if splits.test is not None:
        if seg:
            r = evaluate_segmenter(model, splits.test, l2, cfg.batch_size, cfg.threshold)
            report.final = {"test_loss": r["loss"], "test_dice": r["dice"], "test_iou": r["iou"]}
        else:
            r = evaluate_classifier(model, splits.test, l2, cfg.batch_size)
            cm = r["metrics"]
            report.final = {"test_loss": r["loss"], "test_acc": cm.accuracy, "macro_precision": cm.macro_precision,
                            "macro_recall": cm.macro_recall, "macro_f1": cm.macro_f1,
                            "confusion": r["confusion"].counts.tolist()}
    return report


def train_classifier(model: ModelGraph, splits: DataSplits, cfg: TrainConfig) -> TrainReport:
    return _train(model, splits, cfg, "classify")


def train_segmenter(model: ModelGraph, splits: DataSplits, cfg: TrainConfig) -> TrainReport:
    return _train(model, splits, cfg, "segment")


def config_echo(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, default=str)

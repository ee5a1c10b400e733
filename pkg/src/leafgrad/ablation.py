"""Preprocessing x architecture ablation grid.

Every cell trains a fresh model from the same seed, so cells differ only in
their pipeline and architecture.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .imageio import atomic_write
from .models import build_model, param_report
from .preprocess import PipelineConfig
from .training import DataSplits, TrainConfig, evaluate_classifier, train_classifier


@dataclass
class ModelSpec:
    label: str
    kind: str
    config: dict


@dataclass
class AblationResult:
    cells: list = field(default_factory=list)  # one dict per (model, pipeline)
    per_class: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # (model label, pipeline name) -> TrainReport

    def cells_csv(self) -> str:
        cols = ["model", "pipeline", "accuracy", "macro_precision", "macro_recall", "macro_f1", "size_mb",
                "params", "eval_split", "best_epoch", "model_hash", "seed"]
        return _csv(cols, self.cells)

    def table_csv(self) -> str:
        """Wide table: one row per model, one accuracy column per pipeline, then size."""
        pipelines = list(dict.fromkeys(c["pipeline"] for c in self.cells))
        rows = []
        for model in dict.fromkeys(c["model"] for c in self.cells):
            row = {"model": model}
            for c in self.cells:
                if c["model"] == model:
                    row[c["pipeline"]] = c["accuracy"]
                    row["size_mb"] = c["size_mb"]
            rows.append(row)
        return _csv(["model"] + pipelines + ["size_mb"], rows)

    def per_class_csv(self) -> str:
        return _csv(["model", "pipeline", "class", "precision", "recall", "f1", "support"], self.per_class)

    def save(self, out_dir) -> dict:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"cells": out / "cells.csv", "table": out / "accuracy_table.csv", "per_class": out / "per_class.csv"}
        atomic_write(paths["cells"], self.cells_csv().encode("utf-8"))
        atomic_write(paths["table"], self.table_csv().encode("utf-8"))
        atomic_write(paths["per_class"], self.per_class_csv().encode("utf-8"))
        return paths


def _csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_cell(spec: ModelSpec, pipeline: PipelineConfig, splits: DataSplits, cfg: TrainConfig,
             class_names=None):
    """Train and score one cell.  Returns ``(model, report, scores)``."""
    model = build_model(spec.kind, spec.config, cfg.seed, class_names)
    report = train_classifier(model, splits, cfg)
    for name in ("test", "val", "train"):
        part = getattr(splits, name)
        if part is not None:
            break
    scores = evaluate_classifier(model, part, cfg.l2, cfg.batch_size)
    scores["eval_split"] = name
    return model, report, scores


def ablation_grid(pipelines: Sequence[PipelineConfig], models: Sequence[ModelSpec],
                  data: Callable[[PipelineConfig], DataSplits], cfg: TrainConfig, class_names=None) -> AblationResult:
    """Train every model on every pipeline with one shared seed.

    ``data`` maps a pipeline to its preprocessed splits; it is called once
    per pipeline.  Scores come from the test split, else val, else train.
    """
    result = AblationResult()
    for pipe in pipelines:
        splits = data(pipe)
        for spec in models:
            cell_cfg = replace(cfg, checkpoint_path=None)
            model, report, scores = run_cell(spec, pipe, splits, cell_cfg, class_names)
            cm = scores["metrics"]
            size = param_report(model)
            result.reports[(spec.label, pipe.name)] = report
            result.cells.append({
                "model": spec.label, "pipeline": pipe.name, "accuracy": cm.accuracy,
                "macro_precision": cm.macro_precision, "macro_recall": cm.macro_recall, "macro_f1": cm.macro_f1,
                "size_mb": size["mb"], "params": size["count"], "eval_split": scores["eval_split"],
                "best_epoch": report.best_epoch, "model_hash": model.config_hash(), "seed": cfg.seed,
            })
            names = model.class_names or [str(i) for i in range(len(cm.precision))]
            for i, cls in enumerate(names):
                result.per_class.append({
                    "model": spec.label, "pipeline": pipe.name, "class": cls, "precision": float(cm.precision[i]),
                    "recall": float(cm.recall[i]), "f1": float(cm.f1[i]), "support": int(cm.support[i]),
                })
    return result

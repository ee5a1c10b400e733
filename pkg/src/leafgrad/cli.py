"""Command-line entry point: ``leafgrad <command> [options]``.

Every command resolves a :class:`RunConfig` (defaults, ``--config FILE``,
``LEAFGRAD_SEED``, then flags), writes ``run_config.json`` into ``--out``
and stamps its artifacts with the config hash.  Errors after argument
parsing go to stderr as one JSON line and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ablation import ModelSpec, ablation_grid
from .checkpoint import load_checkpoint, read_echo
from .config import RunConfig
from .data import load_dataset, materialize, toy_classification_splits, toy_segmentation_splits
from .explain import gradcam_pp, heatmap_image, overlay
from .imageio import ImageU8, atomic_write, read_image, write_image, write_lgf1
from .models import build_model, param_report, predict
from .preprocess import Resize, resize_bilinear, run_pipeline
from .training import (DataSplits, evaluate_classifier, evaluate_segmenter, train_classifier,
                       train_segmenter)

COMMANDS = ("preprocess", "train-classify", "train-segment", "evaluate", "explain", "ablate", "info")
DEFAULT_ABLATE_PIPELINES = "resize;resize,edge;resize,clahe;resize,mpn"


# -- argument parsing ----------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run config (any key of the flat config; overrides --config)")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON file with run-config keys")
    p.add_argument("--out", metavar="DIR", default="leafgrad-out", help="output directory")
    if data:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--data", metavar="DIR", help="dataset root (class subdirs, or images/ + masks/)")
        src.add_argument("--synthetic", action="store_true", help="use the seeded toy dataset (default)")
    _config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leafgrad", description="Leaf-disease classification and segmentation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="run a preprocessing pipeline over images, writing LGF1 files")
    p.add_argument("inputs", nargs="+", metavar="IMAGE_OR_DIR")
    _common(p, data=False)

    for name, what in (("train-classify", "classifier"), ("train-segment", "segmenter")):
        p = sub.add_parser(name, help=f"train a {what}; writes history.csv and checkpoint.lgc")
        _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _common(p)

    p = sub.add_parser("explain", help="GradCAM++ heatmap for one image")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--image", required=True, metavar="FILE")
    p.add_argument("--target-class", type=int, default=None, help="default: the predicted class")
    p.add_argument("--layer", default=None, help="feature-map node (default: last conv stage)")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    _common(p, data=False)

    p = sub.add_parser("ablate", help="pipeline x architecture grid; writes cells/accuracy_table/per_class CSVs")
    p.add_argument("--pipelines", default=DEFAULT_ABLATE_PIPELINES, help="';'-separated stage lists")
    p.add_argument("--models", default="cnn,se-convnet", help="comma list of classifier kinds")
    _common(p)

    p = sub.add_parser("info", help="print the parameter report of a model")
    p.add_argument("--checkpoint", metavar="FILE", default=None)
    _config_flags(p)
    p.add_argument("--config", metavar="FILE")
    return ap


def _overrides(ns: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg_") and v is not None}


# -- helpers -------------------------------------------------------------------

def _out_dir(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n").encode("utf-8"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


def _write_csv(path: Path, header: list, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def _load_splits(ns, cfg: RunConfig, pipeline=None) -> tuple[DataSplits, Optional[list]]:
    pipeline = pipeline or cfg.pipeline_config()
    if getattr(ns, "data", None):
        manifest = load_dataset(ns.data, cfg.task, cfg.seed, cfg.split_ratios)
        return materialize(manifest, pipeline), manifest.classes
    if cfg.task == "classify":
        return toy_classification_splits(pipeline, cfg.synthetic_per_class, cfg.synthetic_size, cfg.seed,
                                         cfg.split_ratios), None
    n = cfg.synthetic_count
    return toy_segmentation_splits(pipeline, n, cfg.synthetic_size, cfg.seed, n_val=max(1, n // 4),
                                   n_test=max(1, n // 4)), None


def _checkpoint_config(ns, path) -> tuple[dict, RunConfig]:
    echo = read_echo(path)
    base = (echo.get("run") or {}).get("config", {})
    kind = echo["kind"]
    task = "segment" if kind.startswith("unet") else "classify"
    c, h, w = echo["config"]["input_shape"]
    over = {"task": task, "model": kind, "image_size": h, **_overrides(ns)}
    cfg = RunConfig.resolve(ns.config, over, base=base)
    return echo, cfg


# -- commands ------------------------------------------------------------------

def cmd_preprocess(ns) -> int:
    cfg = RunConfig.resolve(ns.config, _overrides(ns))
    pipe = cfg.pipeline_config()
    out, h = _out_dir(ns), cfg.hash()
    files = []
    for item in ns.inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in (".ppm", ".pgm", ".png"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such image or directory: {p}")
    if not files:
        raise ValueError("no input images found")
    rows = []
    for f in files:
        result = run_pipeline(read_image(f), pipe)
        target = out / (f.stem + ".lgf")
        write_lgf1(target, result)
        rows.append((f.name, target.name, result.height, result.width, result.channels,
                     float(result.values.min()), float(result.values.max()), h))
    _write_csv(out / "index.csv", ["source", "output", "height", "width", "channels", "min", "max", "config_hash"],
               rows)
    _write_json(out / "run_config.json", cfg.echo())
    print(f"preprocessed {len(rows)} image(s) with {pipe.name} -> {out} (config {h})")
    return 0


def _train(ns, task: str) -> int:
    cfg = RunConfig.resolve(ns.config, {**_overrides(ns), "task": task})
    out = _out_dir(ns)
    splits, classes = _load_splits(ns, cfg)
    channels = splits.train.x.shape[1]
    k = len(classes) if classes else max(2, int(splits.train.y.max()) + 1)
    model = build_model(cfg.effective_model, cfg.model_config(classes=k, channels=channels), cfg.seed, classes)
    tcfg = cfg.train_config(checkpoint_path=str(out / "checkpoint.lgc"))
    report = (train_classifier if task == "classify" else train_segmenter)(model, splits, tcfg)
    report.config_hash = cfg.hash()
    report.save(out / "history.csv")
    _write_json(out / "run_config.json", cfg.echo())
    _write_json(out / "summary.json", {**report.summary(), "model_hash": model.config_hash(),
                                       "params": param_report(model)})
    last = report.history[-1]
    metric = "train_acc" if task == "classify" else "train_dice"
    print(f"trained {cfg.effective_model} for {len(report.history)} epoch(s): {metric}={last[metric]:.4f} "
          f"best_epoch={report.best_epoch} -> {out} (config {cfg.hash()})")
    return 0


def cmd_evaluate(ns) -> int:
    echo, cfg = _checkpoint_config(ns, ns.checkpoint)
    model = load_checkpoint(ns.checkpoint)
    out, h = _out_dir(ns), cfg.hash()
    splits, classes = _load_splits(ns, cfg)
    part = getattr(splits, ns.split)
    if part is None:
        raise ValueError(f"split {ns.split!r} is empty for this dataset")
    if cfg.task == "classify":
        r = evaluate_classifier(model, part, cfg.l2, cfg.batch_size)
        cm, counts = r["metrics"], r["confusion"].counts
        names = model.class_names or [str(i) for i in range(counts.shape[0])]
        _write_csv(out / "per_class.csv", ["class", "precision", "recall", "f1", "support", "config_hash"],
                   [row + (h,) for row in cm.rows(names)])
        _write_csv(out / "confusion.csv", ["true\\pred"] + names + ["config_hash"],
                   [[names[i]] + counts[i].tolist() + [h] for i in range(len(names))])
        summary = {"split": ns.split, "loss": r["loss"], "accuracy": cm.accuracy,
                   "macro_precision": cm.macro_precision, "macro_recall": cm.macro_recall, "macro_f1": cm.macro_f1,
                   "zero_division": cm.zero_division}
        line = f"accuracy={cm.accuracy:.4f} macro_f1={cm.macro_f1:.4f}"
    else:
        r = evaluate_segmenter(model, part, cfg.l2, cfg.batch_size, cfg.threshold)
        _write_csv(out / "per_sample.csv", ["index", "iou", "dice", "config_hash"],
                   [(i, float(a), float(b), h) for i, (a, b) in
                    enumerate(zip(r["per_sample_iou"], r["per_sample_dice"]))])
        summary = {"split": ns.split, "loss": r["loss"], "iou": r["iou"], "dice": r["dice"]}
        line = f"iou={r['iou']:.4f} dice={r['dice']:.4f}"
    summary.update(config_hash=h, checkpoint=str(ns.checkpoint))
    _write_json(out / "metrics.json", summary)
    _write_json(out / "run_config.json", cfg.echo())
    print(f"{ns.split}: {line} -> {out} (config {h})")
    return 0


def cmd_explain(ns) -> int:
    echo, cfg = _checkpoint_config(ns, ns.checkpoint)
    model = load_checkpoint(ns.checkpoint)
    out, h = _out_dir(ns), cfg.hash()
    raw = read_image(ns.image)
    c = model.input_shape[0]
    if raw.channels != c:
        raw = ImageU8(np.repeat(raw.pixels, 3, axis=2)) if c == 3 else \
            ImageU8(np.floor(raw.pixels.astype(np.float64) @ [0.299, 0.587, 0.114] + 0.5)[:, :, None])
    pipe = cfg.pipeline_config()
    x = run_pipeline(raw, pipe).to_chw()
    if x.shape != tuple(model.input_shape):
        raise ValueError(f"preprocessed image shape {x.shape} does not match model input {model.input_shape}")
    probs = predict(model, x[None])[0]
    target = int(np.argmax(probs)) if ns.target_class is None else ns.target_class
    heat = gradcam_pp(model, x, target, ns.layer)
    size = next((s for s in pipe.stages if isinstance(s, Resize)), None)
    base = resize_bilinear(raw, size.height, size.width) if size else raw
    note = f"config_hash={h} layer={heat.layer} class={target}"
    write_image(out / "heatmap.pgm", heatmap_image(heat), note)
    write_image(out / "overlay.ppm", overlay(base, heat, ns.alpha), note)
    names = model.class_names or [str(i) for i in range(len(probs))]
    _write_json(out / "explain.json", {"image": str(ns.image), "target_class": target, "layer": heat.layer,
                                       "probs": {n: float(p) for n, p in zip(names, probs)}, "config_hash": h})
    _write_json(out / "run_config.json", cfg.echo())
    print(f"class {names[target]} (p={probs[target]:.4f}) at {heat.layer} -> {out} (config {h})")
    return 0


def cmd_ablate(ns) -> int:
    cfg = RunConfig.resolve(ns.config, {**_overrides(ns), "task": "classify"})
    out, h = _out_dir(ns), cfg.hash()
    pipelines = [cfg.pipeline_config(spec) for spec in ns.pipelines.split(";") if spec.strip()]
    kinds = [k.strip() for k in ns.models.split(",") if k.strip()]
    for k in kinds:
        if k not in ("cnn", "se-convnet"):
            raise ValueError(f"ablate supports classifier kinds cnn and se-convnet, got {k!r}")
    first, classes = _load_splits(ns, cfg, pipelines[0])

    def data(pipe):
        return first if pipe is pipelines[0] else _load_splits(ns, cfg, pipe)[0]

    k = len(classes) if classes else max(2, int(first.train.y.max()) + 1)
    channels = first.train.x.shape[1]
    specs = [ModelSpec(kind, kind, cfg.model_config(kind, classes=k, channels=channels)) for kind in kinds]
    result = ablation_grid(pipelines, specs, data, cfg.train_config(), classes)
    paths = result.save(out)
    _stamp_csv(paths["table"], h)
    _stamp_csv(paths["per_class"], h)
    _stamp_csv(paths["cells"], h)
    _write_json(out / "run_config.json", cfg.echo())
    print(f"ablation: {len(result.cells)} cell(s) -> {out} (config {h})")
    return 0


def _stamp_csv(path: Path, h: str) -> None:
    """Append a run_hash column to a CSV written by the ablation grid."""
    rows = list(csv.reader(io.StringIO(path.read_text())))
    _write_csv(path, rows[0] + ["run_hash"], [r + [h] for r in rows[1:]])


def cmd_info(ns) -> int:
    if ns.checkpoint:
        echo, cfg = _checkpoint_config(ns, ns.checkpoint)
        model = load_checkpoint(ns.checkpoint)
    else:
        cfg = RunConfig.resolve(ns.config, _overrides(ns))
        model = build_model(cfg.effective_model, cfg.model_config(), cfg.seed)
    rep = param_report(model)
    print(model.summary())
    print(json.dumps({"model": model.kind, **rep, "config_hash": cfg.hash()}, sort_keys=True))
    return 0


HANDLERS = {
    "preprocess": cmd_preprocess,
    "train-classify": lambda ns: _train(ns, "classify"),
    "train-segment": lambda ns: _train(ns, "segment"),
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "ablate": cmd_ablate,
    "info": cmd_info,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)  # exits 2 with usage on bad flags
    try:
        return HANDLERS[ns.command](ns)
    except KeyboardInterrupt:
        print(json.dumps({"error": "Interrupted", "message": "interrupted", "command": ns.command}), file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": msg, "command": ns.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Dataset ingestion, stratified splitting, and synthetic toy datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imageio import ImageFormatError, ImageU8, atomic_write, read_image
from .models import DEFAULT_CLASSES
from .preprocess import PipelineConfig, run_pipeline
from .rng import RngState
from .training import ArrayDataset, DataSplits

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    pass


@dataclass
class Entry:
    image: str
    label: Optional[int] = None
    mask: Optional[str] = None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: str
    task: str
    classes: list
    entries: list
    seed: int
    ratios: tuple
    class_counts: dict = field(default_factory=dict)  # split -> per-class counts

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["ratios"] = list(self.ratios)
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        atomic_write(path, self.to_json().encode("utf-8"))
        return path

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        doc["entries"] = [Entry(**e) for e in doc["entries"]]
        doc["ratios"] = tuple(doc["ratios"])
        return cls(**doc)


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` by ``ratios``; ties go to the earlier part."""
    r = np.asarray(ratios, dtype=np.float64)
    quotas = total * r / r.sum()
    base = np.floor(quotas + 1e-9).astype(int)
    frac = quotas - base
    order = sorted(range(len(r)), key=lambda i: (-round(frac[i], 9), i))
    for i in order[: total - int(base.sum())]:
        base[i] += 1
    return base.tolist()


def stratified_counts(class_sizes: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """Per-class split sizes whose column totals match the global apportionment.

    Every class gets the floor of its own quota; the leftover units are
    handed out greedily by descending fractional part (class, then split
    index breaking ties) subject to both the class and the split still
    having room.
    """
    sizes = np.asarray(class_sizes, dtype=int)
    r = np.asarray(ratios, dtype=np.float64)
    r = r / r.sum()
    targets = np.asarray(largest_remainder(int(sizes.sum()), r))
    quotas = sizes[:, None] * r[None, :]
    counts = np.floor(quotas + 1e-9).astype(int)
    frac = quotas - counts
    class_left = sizes - counts.sum(axis=1)
    split_left = targets - counts.sum(axis=0)
    cells = sorted(((-round(frac[c, s], 9), c, s) for c in range(len(sizes)) for s in range(len(r))))
    for _, c, s in cells:
        if class_left[c] > 0 and split_left[s] > 0:
            counts[c, s] += 1
            class_left[c] -= 1
            split_left[s] -= 1
    for c in range(len(sizes)):  # greedy dead ends: fill whatever room remains
        for s in range(len(r)):
            while class_left[c] > 0 and split_left[s] > 0:
                counts[c, s] += 1
                class_left[c] -= 1
                split_left[s] -= 1
    return counts


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _check_decodes(path: Path) -> ImageU8:
    try:
        return read_image(path)
    except (ImageFormatError, OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def load_dataset(root, task: str = "classify", seed: int = 0, split_ratios=(0.7, 0.15, 0.15),
                 classes: Optional[Sequence[str]] = None, persist: bool = True) -> DatasetManifest:
    """Scan ``root`` and assign a deterministic stratified split.

    Classification expects one subdirectory per class; segmentation expects
    ``images/`` and ``masks/`` with files paired by stem.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if len(split_ratios) != 3 or min(split_ratios) < 0 or sum(split_ratios) <= 0:
        raise DatasetError(f"split ratios must be three non-negative numbers, got {split_ratios}")
    rng = RngState(seed).child("split")
    groups: list[list[Entry]] = []
    if task == "classify":
        if classes is None:
            found = sorted(p.name for p in root.iterdir() if p.is_dir())
            classes = list(DEFAULT_CLASSES) if set(DEFAULT_CLASSES) <= set(found) and len(found) == 4 else found
        if not classes:
            raise DatasetError(f"no class directories under {root}")
        for ci, name in enumerate(classes):
            d = root / name
            if not d.is_dir():
                raise DatasetError(f"missing class directory {d}")
            files = _list_images(d)
            if not files:
                raise DatasetError(f"class directory {d} holds no images")
            for f in files:
                _check_decodes(f)
            groups.append([Entry(str(f.relative_to(root)), label=ci) for f in files])
    elif task == "segment":
        classes = ["foreground"]
        idir, mdir = root / "images", root / "masks"
        for d in (idir, mdir):
            if not d.is_dir():
                raise DatasetError(f"missing directory {d}")
        masks = {p.stem: p for p in _list_images(mdir)}
        entries = []
        for f in _list_images(idir):
            if f.stem not in masks:
                raise DatasetError(f"image {f} has no mask in {mdir}")
            img, msk = _check_decodes(f), _check_decodes(masks[f.stem])
            if (img.height, img.width) != (msk.height, msk.width):
                raise DatasetError(f"mask {masks[f.stem]} size differs from image {f}")
            entries.append(Entry(str(f.relative_to(root)), mask=str(masks[f.stem].relative_to(root))))
        if not entries:
            raise DatasetError(f"no images under {idir}")
        groups.append(entries)
    else:
        raise DatasetError(f"task must be 'classify' or 'segment', got {task!r}")

    counts = stratified_counts([len(g) for g in groups], split_ratios)
    out, per_split = [], {s: [0] * len(groups) for s in SPLITS}
    for gi, group in enumerate(groups):
        order = rng.permutation(len(group))
        pos = 0
        for si, s in enumerate(SPLITS):
            for j in order[pos:pos + counts[gi, si]]:
                group[j].split = s
            pos += counts[gi, si]
            per_split[s][gi] = int(counts[gi, si])
        out.extend(group)
    manifest = DatasetManifest(str(root), task, list(classes), out, int(seed), tuple(split_ratios), per_split)
    if persist:
        manifest.save()
    return manifest


def _target_hw(cfg: PipelineConfig, img: ImageU8):
    from .preprocess import Resize

    for s in cfg.stages:
        if isinstance(s, Resize):
            return s.height, s.width
    return img.height, img.width


def materialize(manifest: DatasetManifest, pipeline: PipelineConfig, channels: int = 3) -> DataSplits:
    """Decode, preprocess, and stack each split into arrays."""
    root = Path(manifest.root)
    parts = {}
    for s in SPLITS:
        xs, ys = [], []
        for e in manifest.split(s):
            img = _to_channels(read_image(root / e.image), channels)
            xs.append(run_pipeline(img, pipeline).to_chw())
            if manifest.task == "segment":
                m = read_image(root / e.mask)
                h, w = _target_hw(pipeline, img)
                from .preprocess import resize_bilinear

                m = resize_bilinear(m, h, w) if (m.height, m.width) != (h, w) else m
                ys.append((m.pixels[:, :, :1].transpose(2, 0, 1) > 127).astype(np.float32))
            else:
                ys.append(e.label)
        parts[s] = ArrayDataset(np.stack(xs).astype(np.float32), np.asarray(ys)) if xs else None
    if parts["train"] is None:
        raise DatasetError("training split is empty")
    return DataSplits(parts["train"], parts["val"], parts["test"])


def _to_channels(img: ImageU8, channels: int) -> ImageU8:
    if img.channels == channels:
        return img
    if channels == 3:
        return ImageU8(np.repeat(img.pixels, 3, axis=2))
    return ImageU8(np.floor(img.pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114]) + 0.5)[:, :, None])


# -- synthetic data ------------------------------------------------------------

def toy_classification_images(n_per_class: int = 16, size: int = 32, seed: int = 0, classes: int = 4):
    """Textured 8-bit RGB images, one pattern family per class.

    0: horizontal stripes, 1: vertical stripes, 2: a bright disc, 3: a checkerboard.
    Period, phase, tint and noise vary per image.
    """
    if not 2 <= classes <= 4:
        raise ValueError("toy set supports 2 to 4 classes")
    rng = RngState(seed).child("toy-classify")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for c in range(classes):
        for _ in range(n_per_class):
            period = rng.uniform(4.0, 8.0)
            phase = rng.uniform(0, 2 * np.pi)
            if c == 0:
                base = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
            elif c == 1:
                base = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
            elif c == 2:
                cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
                r = rng.uniform(size * 0.15, size * 0.3)
                base = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
            else:
                p = int(round(period / 2)) or 1
                base = (((yy // p) + (xx // p)) % 2).astype(np.float64)
            tint = rng.uniform(0.6, 1.0, 3)
            img = base[:, :, None] * tint[None, None, :] * 200 + 30 + rng.normal(0, 10, (size, size, 3))
            images.append(ImageU8(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)))
            labels.append(c)
    return images, np.asarray(labels)


def toy_shapes(n: int = 32, size: int = 32, seed: int = 0):
    """Random discs and rectangles over textured clutter, with binary masks."""
    rng = RngState(seed).child("toy-shapes")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, masks = [], []
    for _ in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            if rng.random() < 0.5:
                cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
                r = rng.uniform(size * 0.1, size * 0.25)
                mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                y0, x0 = rng.integers(0, size * 3 // 4, 2)
                h, w = rng.integers(size // 6, size // 3, 2)
                mask[y0:y0 + h, x0:x0 + w] = True
        bg = 60 + 40 * np.sin(xx / rng.uniform(2, 5) + rng.uniform(0, 6)) * np.cos(yy / rng.uniform(2, 5))
        bg = np.stack([bg * 0.8, bg, bg * 0.6], axis=-1)
        fg = np.array([170.0, 200.0, 80.0]) * rng.uniform(0.85, 1.15)
        img = np.where(mask[:, :, None], fg, bg) + rng.normal(0, 12, (size, size, 3))
        images.append(ImageU8(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)))
        masks.append(mask)
    return images, np.asarray(masks)


def split_indices(labels: np.ndarray, ratios, seed: int) -> dict[str, np.ndarray]:
    """Stratified index split using the same rule as :func:`load_dataset`."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    counts = stratified_counts([int((labels == c).sum()) for c in classes], ratios)
    rng = RngState(seed).child("split")
    out = {s: [] for s in SPLITS}
    for ci, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)[rng.permutation(int((labels == c).sum()))]
        pos = 0
        for si, s in enumerate(SPLITS):
            out[s].extend(idx[pos:pos + counts[ci, si]].tolist())
            pos += counts[ci, si]
    return {s: np.asarray(sorted(v), dtype=np.int64) for s, v in out.items()}


def toy_classification_splits(pipeline: PipelineConfig, n_per_class: int = 16, size: int = 32, seed: int = 0,
                              ratios=None, classes: int = 4) -> DataSplits:
    """Preprocessed toy classification data; ``ratios=None`` puts everything in train."""
    images, labels = toy_classification_images(n_per_class, size, seed, classes)
    x = np.stack([run_pipeline(im, pipeline).to_chw() for im in images]).astype(np.float32)
    if ratios is None:
        return DataSplits(ArrayDataset(x, labels))
    parts = split_indices(labels, ratios, seed)
    ds = {s: ArrayDataset(x[i], labels[i]) if len(i) else None for s, i in parts.items()}
    return DataSplits(ds["train"], ds["val"], ds["test"])


def toy_segmentation_splits(pipeline: PipelineConfig, n: int = 32, size: int = 32, seed: int = 0,
                            n_val: int = 0, n_test: int = 0) -> DataSplits:
    """Preprocessed toy shapes: the first ``n`` images train, then val, then test."""
    images, masks = toy_shapes(n + n_val + n_test, size, seed)
    x = np.stack([run_pipeline(im, pipeline).to_chw() for im in images]).astype(np.float32)
    y = masks[:, None].astype(np.float32)
    train = ArrayDataset(x[:n], y[:n])
    val = ArrayDataset(x[n:n + n_val], y[n:n + n_val]) if n_val else None
    test = ArrayDataset(x[n + n_val:], y[n + n_val:]) if n_test else None
    return DataSplits(train, val, test)

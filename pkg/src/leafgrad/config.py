"""Flat run configuration shared by every CLI command.

Resolution order, later wins: built-in defaults, ``--config FILE`` (JSON),
the ``LEAFGRAD_SEED`` environment variable, command-line flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .augment import AugmentConfig
from .models import SEConvNetConfig, UNetConfig
from .preprocess import PipelineConfig, parse_pipeline
from .training import TrainConfig

SEED_ENV = "LEAFGRAD_SEED"


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # general
    seed: int = 42
    task: str = "classify"  # classify | segment
    # preprocessing
    pipeline: str = "resize,mpn"
    image_size: int = 224
    clahe_clip: float = 2.0
    clahe_grid: int = 8
    laplacian: int = 4
    # model
    model: Optional[str] = None  # se-convnet | cnn (classify, default se-convnet); unet | unet-se (segment, default unet-se)
    conv_stages: str = "32,64,128"
    se_ratio: int = 16
    dense_width: int = 64
    dropout: float = 0.5
    l2: float = 1e-4
    unet_depth: int = 4
    unet_base: int = 32
    unet_dropout: float = 0.2
    # training
    epochs: int = 100
    batch_size: int = 16
    lr: Optional[float] = None  # 1e-3 classify, 1e-4 segment
    plateau_factor: float = 0.5
    plateau_patience: int = 15
    min_lr: float = 0.0
    early_stop_patience: int = 15
    augment: Optional[bool] = None  # off for classify, on for segment
    splits: str = "0.7,0.15,0.15"  # train,val,test ratios
    threshold: float = 0.5
    # synthetic data (used when no --data directory is given)
    synthetic_per_class: int = 16
    synthetic_count: int = 32
    synthetic_size: int = 32

    # -- construction ---------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            setattr(self, k, _coerce(known[k], v))
        return self

    @classmethod
    def resolve(cls, config_file=None, overrides: Optional[dict] = None, env=None,
                base: Optional[dict] = None) -> "RunConfig":
        """Layer defaults, ``base`` (e.g. a checkpoint's echo), file, env, overrides."""
        cfg = cls()
        if base:
            cfg.update(base)
        if config_file:
            try:
                doc = json.loads(Path(config_file).read_text())
            except json.JSONDecodeError as exc:
                raise RunConfigError(f"{config_file}: invalid JSON ({exc})") from exc
            if not isinstance(doc, dict):
                raise RunConfigError(f"{config_file}: expected a flat JSON object")
            cfg.update(doc)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.update({"seed": env[SEED_ENV]})
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in ("classify", "segment"):
            raise RunConfigError(f"task must be classify or segment, got {self.task!r}")
        model = self.effective_model
        if model not in ("se-convnet", "cnn", "unet", "unet-se"):
            raise RunConfigError(f"unknown model {model!r}")
        if (self.task == "segment") != model.startswith("unet"):
            raise RunConfigError(f"model {model!r} does not fit task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise RunConfigError("epochs and batch_size must be positive")
        ratios = self.split_ratios
        if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
            raise RunConfigError(f"splits must be three non-negative ratios, got {self.splits!r}")

    # -- derived values ---------------------------------------------------
    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.effective_model
        d["lr"] = self.effective_lr
        d["augment"] = self.effective_augment
        return d

    @property
    def effective_model(self) -> str:
        if self.model is not None:
            return self.model
        return "se-convnet" if self.task == "classify" else "unet-se"

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.task == "classify" else 1e-4

    @property
    def effective_augment(self) -> bool:
        return self.augment if self.augment is not None else self.task == "segment"

    @property
    def split_ratios(self) -> tuple:
        try:
            return tuple(float(x) for x in self.splits.split(","))
        except ValueError as exc:
            raise RunConfigError(f"bad splits {self.splits!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def echo(self) -> dict:
        """The resolved config plus its hash, as written next to every artifact."""
        return {"config": self.resolved(), "config_hash": self.hash()}

    def pipeline_config(self, spec: Optional[str] = None) -> PipelineConfig:
        return parse_pipeline(spec or self.pipeline, self.image_size, self.clahe_clip,
                              (self.clahe_grid, self.clahe_grid), self.laplacian, ensure_resize=True)

    def model_config(self, kind: Optional[str] = None, classes: int = 4, channels: int = 3) -> dict:
        kind = kind or self.effective_model
        shape = (channels, self.image_size, self.image_size)
        if kind in ("se-convnet", "cnn"):
            cfg = SEConvNetConfig(shape, tuple(int(s) for s in self.conv_stages.split(",")), 3, kind == "se-convnet",
                                  self.se_ratio, self.dense_width, self.dropout, self.l2, classes)
        else:
            cfg = UNetConfig(shape, self.unet_depth, self.unet_base, kind == "unet-se", self.se_ratio,
                             self.unet_dropout, self.l2)
        d = dataclasses.asdict(cfg)
        d.pop("se_enabled")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def train_config(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.effective_lr, l2=self.l2,
            plateau_factor=self.plateau_factor, plateau_patience=self.plateau_patience, min_lr=self.min_lr,
            early_stop_patience=self.early_stop_patience or None,
            augment=AugmentConfig() if self.effective_augment else None, seed=self.seed,
            threshold=self.threshold, checkpoint_path=checkpoint_path,
            checkpoint_run=self.echo() if checkpoint_path else None,
        )


def _coerce(f: dataclasses.Field, v: Any) -> Any:
    if v is None:
        return None
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if "bool" in t:
            if isinstance(v, str):
                low = v.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(v)
            return bool(v)
        if "int" in t:
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(v)
            return int(v)
        if "float" in t:
            return float(v)
        return str(v)
    except (TypeError, ValueError):
        raise RunConfigError(f"bad value {v!r} for {f.name} ({t})") from None

"""LGC1 checkpoint files.

Layout (all integers little-endian)::

    b"LGC1"
    u32   format version (1)
    u32   config length, then that many bytes of canonical JSON (UTF-8)
    u32   tensor count
    per tensor:
        u32 name length, name (UTF-8)
        u8  dtype code (1 = float32)
        u32 rank, then rank x u64 dims
        raw float32 values, row-major

The config echo carries the model kind, its config, seed and class names,
which is enough to rebuild the graph before the tensors are loaded.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .imageio import atomic_write
from .models import ModelGraph, build_model

MAGIC = b"LGC1"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


def canonical_config(model: ModelGraph, seed: int = 0, run: Optional[dict] = None) -> str:
    doc = {"kind": model.kind, "config": model.config, "classes": model.class_names, "seed": seed,
           "config_hash": model.config_hash()}
    if run is not None:
        doc["run"] = run
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(model: ModelGraph, seed: int = 0, run: Optional[dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = canonical_config(model, seed, run).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<BI", DTYPE_F32, arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelGraph, path, seed: int = 0, run: Optional[dict] = None) -> None:
    """Write atomically.  ``run`` is an optional run-config echo stored verbatim."""
    atomic_write(path, encode_checkpoint(model, seed, run))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    """Parse bytes into ``(config echo, {name: float32 array})``."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = r.unpack("<I", "config length")
    try:
        config = json.loads(r.take(clen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config echo: {exc}") from exc
    if not isinstance(config, dict) or not {"kind", "config", "seed"} <= set(config):
        raise CheckpointError("config echo lacks kind/config/seed")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"tensor {i} name length")
        try:
            name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt name for tensor {i}") from exc
        code, rank = r.unpack("<BI", f"{name} dtype/rank")
        if code != DTYPE_F32:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return config, tensors


def read_echo(path) -> dict:
    """The config echo of a checkpoint file, without rebuilding the model."""
    return decode_checkpoint(Path(path).read_bytes())[0]


def load_checkpoint(path) -> ModelGraph:
    config, tensors = decode_checkpoint(Path(path).read_bytes())
    try:
        model = build_model(config["kind"], config["config"], config["seed"], config.get("classes"))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot rebuild model from config echo: {exc}") from exc
    if config.get("config_hash") not in (None, model.config_hash()):
        raise CheckpointError("config hash does not match the rebuilt model")
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the configured model: {exc}") from exc
    return model

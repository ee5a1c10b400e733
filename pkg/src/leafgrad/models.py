"""Model graphs: SE-ConvNet, its plain-CNN ablation, and U-Net with optional SE.

A :class:`ModelGraph` is an ordered list of named nodes, each holding a
layer and the names of the nodes it reads from.  Sequential models read
from the previous node; U-Net skip connections read from encoder nodes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .attention import SEBlock
from .layers import (Activation, BatchNorm2D, Concat, Conv2D, ConvTranspose2D, Dense, Dropout, Flatten, Layer,
                     MaxPool2D, Softmax)
from .rng import RngState
from .tensor import Tensor, no_grad

DEFAULT_CLASSES = ("bacterial", "dried", "fungal", "healthy")


class ConfigError(ValueError):
    """A model or run configuration violates its invariants."""


@dataclass
class SEConvNetConfig:
    input_shape: tuple = (3, 224, 224)  # C, H, W
    conv_stages: tuple = (32, 64, 128)
    kernel_size: int = 3
    se_enabled: bool = True
    se_ratio: int = 16
    dense_width: int = 64
    dropout_rate: float = 0.5
    l2_coeff: float = 1e-4
    classes: int = 4

    def validate(self) -> None:
        if len(self.conv_stages) < 1:
            raise ConfigError("SE-ConvNet needs at least one conv stage")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        c, h, w = self.input_shape
        f = 2 ** len(self.conv_stages)
        if h % f or w % f:
            raise ConfigError(f"input {h}x{w} must be divisible by {f} for {len(self.conv_stages)} pooling stages")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass
class UNetConfig:
    input_shape: tuple = (3, 224, 224)
    depth: int = 4
    base_filters: int = 32
    se_enabled: bool = True
    se_ratio: int = 16
    dropout_rate: float = 0.2
    l2_coeff: float = 1e-4

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("U-Net depth must be >= 1")
        c, h, w = self.input_shape
        f = 2 ** self.depth
        if h % f or w % f:
            raise ConfigError(f"U-Net input {h}x{w} must be divisible by 2^depth = {f}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass
class GraphNode:
    name: str
    layer: Layer
    inputs: tuple


class ModelGraph:
    """Ordered layer graph with named parameters."""

    def __init__(self, kind: str, config: dict, input_shape: tuple, class_names: Optional[list] = None):
        self.kind = kind
        self.config = config
        self.input_shape = tuple(input_shape)
        self.class_names = list(class_names) if class_names is not None else None
        self.nodes: list[GraphNode] = []
        self._by_name: dict[str, GraphNode] = {}
        self.cam_layer: Optional[str] = None

    # -- construction --------------------------------------------------
    def add(self, name: str, layer: Layer, inputs: Optional[tuple] = None) -> str:
        if name in self._by_name or name == "input":
            raise ConfigError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = (self.nodes[-1].name if self.nodes else "input",)
        for src in inputs:
            if src != "input" and src not in self._by_name:
                raise ConfigError(f"node {name!r} reads from unknown node {src!r}")
        node = GraphNode(name, layer, tuple(inputs))
        self.nodes.append(node)
        self._by_name[name] = node
        return name

    def layer(self, name: str) -> Layer:
        try:
            return self._by_name[name].layer
        except KeyError:
            raise KeyError(f"unknown layer {name!r}") from None

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    # -- parameters ----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{n.name}.{k}": t for n in self.nodes for k, t in n.layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{n.name}.{k}": b for n in self.nodes for k, b in n.layer.buffers.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data.copy() for k, t in self.named_parameters().items()}
        state.update({k: b.copy() for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            dst = params[k].data if k in params else buffers[k]
            if dst.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: model {dst.shape}, state {v.shape}")
            dst[...] = v

    def config_hash(self) -> str:
        doc = {"kind": self.kind, "config": self.config, "classes": self.class_names}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    # -- execution -----------------------------------------------------
    def forward(self, x: Tensor, training: bool = False, taps: Optional[dict] = None) -> Tensor:
        """Run the graph.

        Any node name present as a key in ``taps`` gets its output stored
        there, which is how explainability reads intermediate activations.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise F.ShapeError(f"model expects input N x {' x '.join(map(str, self.input_shape))}, got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad) if x.is_leaf else x
        values = {"input": x}
        for node in self.nodes:
            out = node.layer.forward(*(values[i] for i in node.inputs), training=training)
            values[node.name] = out
            if taps is not None and node.name in taps:
                taps[node.name] = out
        return values[self.output_name]

    def trace_shapes(self, batch: int = 1) -> list[tuple[str, str, tuple]]:
        """Static shape propagation: (node name, layer description, output shape)."""
        shapes = {"input": (batch,) + self.input_shape}
        rows = []
        for node in self.nodes:
            s = node.layer.output_shape(*(shapes[i] for i in node.inputs))
            shapes[node.name] = s
            rows.append((node.name, node.layer.describe(), s))
        return rows

    def summary(self) -> str:
        lines = [f"{self.kind}  input {self.input_shape}"]
        for name, desc, shape in self.trace_shapes():
            lines.append(f"  {name:<22} {desc:<34} {shape}")
        rep = param_report(self)
        lines.append(f"  parameters: {rep['count']}  ({rep['bytes32']} bytes, {rep['mb']:.2f} MB at 32-bit)")
        return "\n".join(lines)


def _conv_bn_relu(g: ModelGraph, prefix: str, cin: int, cout: int, k: int, rng: RngState, suffix: str = "") -> None:
    g.add(f"{prefix}.conv{suffix}", Conv2D(cin, cout, k, rng=rng.child(f"{prefix}.conv{suffix}")))
    g.add(f"{prefix}.bn{suffix}", BatchNorm2D(cout, identity_fallback=True))
    g.add(f"{prefix}.relu{suffix}", Activation("relu"))


def build_se_convnet(cfg: SEConvNetConfig, rng: RngState, class_names: Optional[list] = None) -> ModelGraph:
    """conv-BN-ReLU-(SE)-maxpool per stage, then dense-ReLU-dropout-dense-softmax."""
    cfg.validate()
    kind = "se-convnet" if cfg.se_enabled else "cnn"
    g = ModelGraph(kind, _config_dict(cfg), cfg.input_shape, class_names)
    c, h, w = cfg.input_shape
    cin = c
    for i, filters in enumerate(cfg.conv_stages, start=1):
        p = f"stage{i}"
        _conv_bn_relu(g, p, cin, filters, cfg.kernel_size, rng)
        if cfg.se_enabled:
            g.add(f"{p}.se", SEBlock(filters, cfg.se_ratio, rng=rng.child(f"{p}.se")))
        g.cam_layer = g.output_name
        g.add(f"{p}.pool", MaxPool2D(2))
        cin = filters
        h, w = h // 2, w // 2
    g.add("flatten", Flatten())
    g.add("fc1", Dense(cin * h * w, cfg.dense_width, rng=rng.child("fc1")))
    g.add("fc1.relu", Activation("relu"))
    g.add("dropout", Dropout(cfg.dropout_rate, rng=rng.child("dropout")))
    g.add("logits", Dense(cfg.dense_width, cfg.classes, rng=rng.child("logits")))
    g.add("probs", Softmax())
    return g


def build_unet(cfg: UNetConfig, rng: RngState) -> ModelGraph:
    """Encoder (conv-BN-ReLU x2, SE?, maxpool) per level, bottleneck, mirrored decoder, 1x1 logit head."""
    cfg.validate()
    kind = "unet-se" if cfg.se_enabled else "unet"
    g = ModelGraph(kind, _config_dict(cfg), cfg.input_shape)
    cin = cfg.input_shape[0]
    skips = []
    for d in range(1, cfg.depth + 1):
        p = f"enc{d}"
        f = cfg.base_filters * 2 ** (d - 1)
        _conv_bn_relu(g, p, cin, f, 3, rng, "1")
        _conv_bn_relu(g, p, f, f, 3, rng, "2")
        if cfg.se_enabled:
            g.add(f"{p}.se", SEBlock(f, cfg.se_ratio, rng=rng.child(f"{p}.se")))
        skips.append((g.output_name, f))
        g.add(f"{p}.pool", MaxPool2D(2))
        cin = f
    fb = cfg.base_filters * 2 ** cfg.depth
    _conv_bn_relu(g, "bottleneck", cin, fb, 3, rng, "1")
    _conv_bn_relu(g, "bottleneck", fb, fb, 3, rng, "2")
    if cfg.dropout_rate > 0:
        g.add("bottleneck.dropout", Dropout(cfg.dropout_rate, rng=rng.child("bottleneck.dropout")))
    cin = fb
    for d in range(cfg.depth, 0, -1):
        p = f"dec{d}"
        skip, f = skips[d - 1]
        g.add(f"{p}.up", ConvTranspose2D(cin, f, 2, 2, rng=rng.child(f"{p}.up")))
        g.add(f"{p}.concat", Concat(), inputs=(f"{p}.up", skip))
        _conv_bn_relu(g, p, 2 * f, f, 3, rng, "1")
        _conv_bn_relu(g, p, f, f, 3, rng, "2")
        if cfg.se_enabled:
            g.add(f"{p}.se", SEBlock(f, cfg.se_ratio, rng=rng.child(f"{p}.se")))
        cin = f
    g.cam_layer = g.output_name
    g.add("head", Conv2D(cin, 1, 1, rng=rng.child("head")))
    return g


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


MODEL_KINDS = ("se-convnet", "cnn", "unet", "unet-se")


def build_model(kind: str, config: dict, seed: int, class_names: Optional[list] = None) -> ModelGraph:
    """Rebuild a model from its kind and config dict (the checkpoint echo)."""
    config = dict(config)
    if "input_shape" in config:
        config["input_shape"] = tuple(config["input_shape"])
    rng = RngState(seed)
    if kind in ("se-convnet", "cnn"):
        if "conv_stages" in config:
            config["conv_stages"] = tuple(config["conv_stages"])
        config["se_enabled"] = kind == "se-convnet"
        return build_se_convnet(SEConvNetConfig(**config), rng, class_names)
    if kind in ("unet", "unet-se"):
        config["se_enabled"] = kind == "unet-se"
        return build_unet(UNetConfig(**config), rng)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def forward_classify(model: ModelGraph, batch: Tensor, training: bool = False) -> Tensor:
    """Class probabilities, N x K; rows sum to one."""
    if model.kind not in ("se-convnet", "cnn") and not isinstance(model.nodes[-1].layer, Softmax):
        raise ValueError(f"model kind {model.kind!r} does not produce class probabilities")
    return model.forward(batch, training=training)


def forward_segment(model: ModelGraph, batch: Tensor, training: bool = False) -> Tensor:
    """Mask logits, N x 1 x H x W; apply a sigmoid for probabilities."""
    out = model.forward(batch, training=training)
    if out.ndim != 4 or out.shape[1] != 1:
        raise ValueError(f"model {model.kind!r} does not produce a single-channel mask")
    return out


def predict(model: ModelGraph, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward over an array in chunks, without recording a tape."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model.forward(Tensor(x[i:i + batch_size].astype(model.dtype)), training=False).data)
    return np.concatenate(outs, axis=0)


def param_report(model: ModelGraph) -> dict:
    """Trainable parameter count and its 32-bit storage size.

    Batch-norm running statistics are reported separately as ``buffers``.
    """
    count = sum(t.size for t in model.parameters())
    buffers = sum(b.size for b in model.named_buffers().values())
    return {"count": count, "bytes32": 4 * count, "mb": 4 * count / 1e6, "buffers": buffers}

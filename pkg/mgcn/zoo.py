"""
Model zoo: builders for the benchmarked architectures.

Every builder returns a Network whose last layer is Dense(1, sigmoid) unless
it is called with include_top=False, in which case it stops at the last
spatial layer and the result is meant for attach_head().
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from .errors import ModelConfigError, ShapeError, UsageError
from .layers import (
    Activation,
    AvgPool,
    BatchNorm,
    Branch,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    LayerSpec,
    LayerState,
    MaxPool,
)
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

MODEL_NAMES = ("cnn", "alexnet", "inception-v4", "densenet-mini", "vgg-mini")
HEAD_MODELS = ("inception-v4", "densenet-mini", "vgg-mini")
POOLS = ("flatten", "global_avg")

INCEPTION_V4_FILTERS = (
    (64, 96, 128, 16, 32, 32, 32),
    (128, 128, 192, 32, 96, 64, 64),
)


@dataclass(frozen=True)
class TraceRow:
    name: str
    kind: str
    output_shape: Tuple[int, ...]
    params: int


@dataclass(frozen=True)
class HeadPreset:
    pool: str
    units: Tuple[int, ...]
    dropout: Optional[float] = None


HEAD_PRESETS: Dict[str, HeadPreset] = {
    "densenet121": HeadPreset("flatten", (32,), 0.2),
    "densenet169": HeadPreset("flatten", (32,), 0.2),
    "densenet201": HeadPreset("flatten", (32,)),
    "vgg16": HeadPreset("flatten", (256,)),
    "vgg19": HeadPreset("flatten", (4096, 4096)),
    "inception-v3": HeadPreset("global_avg", (128,)),
}


def _chw(input_shape: Sequence[int]) -> Tuple[int, int, int]:
    h, w, c = input_shape
    return (int(c), int(h), int(w))


def trace_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> List[TraceRow]:
    """Per-layer output shapes and parameter counts from an (H, W, C) input. Allocates nothing."""
    shape: Tuple[int, ...] = _chw(input_shape)
    rows = []
    for spec in layers:
        params = L.count_params(spec, shape)
        shape = L.output_shape(spec, shape)
        rows.append(TraceRow(spec.name, spec.kind, shape, params))
    return rows


# ============================================================
# Network
# ============================================================


@dataclass
class Network:
    name: str
    layers: List[LayerSpec]
    states: List[LayerState]
    input_shape: Tuple[int, int, int]
    frozen_prefix: int = 0
    config: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.layers) != len(self.states):
            raise ModelConfigError("layers and states must be parallel lists")
        if not 0 <= self.frozen_prefix <= len(self.layers):
            raise ModelConfigError(
                f"frozen_prefix {self.frozen_prefix} out of range for {len(self.layers)} layers"
            )

    def forward(self, x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
        """NCHW batch in, per-layer outputs out. The frozen prefix never records on the tape."""
        expected = _chw(self.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{self.name} expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        for i, (spec, state) in enumerate(zip(self.layers, self.states)):
            x = L.forward(spec, state, x, tape if i >= self.frozen_prefix else None)
        return x

    def set_mode(self, mode: str) -> "Network":
        for i, state in enumerate(self.states):
            L.set_mode(state, "eval" if i < self.frozen_prefix else mode)
        return self

    def predict(self, x: Tensor) -> np.ndarray:
        """Eval-mode scores, shape (N,)."""
        self.set_mode("eval")
        return self.forward(x).data.reshape(-1)

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        out = []
        for state in self.states:
            out.extend(L.named_tensors(state))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_tensors() if t.trainable]

    def count_params(self, trainable_only: bool = False) -> int:
        """Enumerated census of learnable parameters (batch-norm running stats excluded)."""
        total = 0
        for name, t in self.named_tensors():
            if name.endswith(("/running_mean", "/running_var")):
                continue
            if trainable_only and not t.trainable:
                continue
            total += t.size
        return total

    def shape_trace(self) -> List[TraceRow]:
        return trace_shapes(self.layers, self.input_shape)

    def output_shape(self) -> Tuple[int, ...]:
        trace = self.shape_trace()
        return trace[-1].output_shape if trace else _chw(self.input_shape)

    def reseed(self, seed: int) -> None:
        for i, (spec, state) in enumerate(zip(self.layers, self.states)):
            L.reseed(spec, state, L.derive_seed(seed, i))


# ============================================================
# Blueprints
# ============================================================


@dataclass
class Blueprint:
    """A named, shape-checked layer list. Turning it into a Network allocates the parameters."""

    name: str
    layers: List[LayerSpec]
    input_shape: Tuple[int, int, int]
    frozen_prefix: int = 0
    config: Dict[str, object] = field(default_factory=dict)

    def shape_trace(self) -> List[TraceRow]:
        return trace_shapes(self.layers, self.input_shape)

    def count_params(self) -> Tuple[int, int]:
        """(total, trainable) learnable parameter counts in closed form."""
        rows = self.shape_trace()
        total = sum(r.params for r in rows)
        frozen = sum(r.params for r in rows[: self.frozen_prefix])
        return total, total - frozen


def _unique_name(kind: str, used: set) -> str:
    n = 1
    while f"{kind}_{n}" in used:
        n += 1
    name = f"{kind}_{n}"
    used.add(name)
    return name


def _collect_names(layers: Sequence[LayerSpec], used: set) -> None:
    for spec in layers:
        if spec.name:
            used.add(spec.name)
        if isinstance(spec, Branch):
            for chain in spec.chains:
                _collect_names(chain, used)


def _name_layers(layers: Sequence[LayerSpec], used: set, prefix: str = "") -> List[LayerSpec]:
    named = []
    for spec in layers:
        name = spec.name or prefix + _unique_name(spec.kind, used)
        if isinstance(spec, Branch):
            chains = tuple(tuple(_name_layers(chain, used, f"{name}/")) for chain in spec.chains)
            spec = dataclasses.replace(spec, name=name, chains=chains)
        elif name != spec.name:
            spec = dataclasses.replace(spec, name=name)
        named.append(spec)
    return named


def _check_trace(name: str, layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> None:
    try:
        trace_shapes(layers, input_shape)
    except ShapeError as e:
        raise ModelConfigError(f"img_size {input_shape[0]} too small for {name}: {e}") from e


def blueprint(
    name: str,
    layers: Sequence[LayerSpec],
    img_size: int,
    channels: int,
    config: Optional[Dict[str, object]] = None,
) -> Blueprint:
    if img_size < 1 or channels < 1:
        raise ModelConfigError(f"img_size and channels must be positive, got {img_size}, {channels}")
    input_shape = (int(img_size), int(img_size), int(channels))
    layers = _name_layers(layers, set())
    _check_trace(name, layers, input_shape)
    return Blueprint(name, layers, input_shape, 0, dict(config or {}))


def init_states(
    layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int, offset: int = 0
) -> List[LayerState]:
    shape: Tuple[int, ...] = _chw(input_shape)
    states = []
    for i, spec in enumerate(layers):
        states.append(L.init_params(spec, shape, L.derive_seed(seed, offset + i)))
        shape = L.output_shape(spec, shape)
    return states


def allocate(bp: Blueprint, seed: int = 0) -> Network:
    """Initialize parameters for a blueprint; layer i draws from derive_seed(seed, i)."""
    states = init_states(bp.layers, bp.input_shape, seed)
    for state in states[: bp.frozen_prefix]:
        L.set_trainable(state, False)
    logger.debug(f"[Zoo] Built {bp.name} with {len(bp.layers)} layers on {bp.input_shape}")
    return Network(bp.name, list(bp.layers), states, bp.input_shape, bp.frozen_prefix, dict(bp.config))


def _conv(filters: int, kernel=3, stride=1, padding: str = "same", activation: Optional[str] = "relu") -> Conv2D:
    return Conv2D(filters, kernel, stride, padding, activation)


def _top(pool: LayerSpec, units: Sequence[int] = (), dropout: Optional[float] = None) -> List[LayerSpec]:
    top: List[LayerSpec] = [pool]
    for i, u in enumerate(units):
        top.append(Dense(int(u), "relu"))
        if i == 0 and dropout:
            top.append(Dropout(dropout))
    top.append(Dense(1, "sigmoid"))
    return top


# ============================================================
# Architectures
# ============================================================


def inception_block(filters: Sequence[int]) -> Branch:
    """Four parallel paths (1x1, 1x1-3x3, 1x1-3x3-3x3, avgpool-1x1) merged by channel concat."""
    filters = tuple(int(f) for f in filters)
    if len(filters) != 7:
        raise ModelConfigError(f"inception_block needs exactly 7 filter counts, got {len(filters)}")
    if min(filters) < 1:
        raise ModelConfigError(f"inception_block filter counts must be positive, got {filters}")
    f0, f1, f2, f3, f4, f5, f6 = filters
    return Branch(
        (
            (_conv(f0, 1),),
            (_conv(f1, 1), _conv(f2, 3)),
            (_conv(f3, 1), _conv(f4, 3), _conv(f5, 3)),
            (AvgPool((3, 3), (1, 1), "same"), _conv(f6, 1)),
        )
    )


def dense_layer(growth: int) -> Branch:
    """Identity path plus BN-ReLU-conv path; concat makes every earlier map visible downstream."""
    return Branch(((), (BatchNorm(), Activation("relu"), _conv(growth, activation=None))))


def transition(channels: int) -> List[LayerSpec]:
    return [BatchNorm(), _conv(channels // 2, 1, activation=None), AvgPool(2, 2)]


def custom_cnn_blueprint(img_size: int, channels: int = 1) -> Blueprint:
    layers = [
        _conv(32), MaxPool(2),
        _conv(64), MaxPool(2),
        _conv(128), MaxPool(2),
        _conv(256), _conv(256), MaxPool(2),
        Flatten(),
        Dense(32, "relu"),
        Dense(1, "sigmoid"),
    ]
    return blueprint("cnn", layers, img_size, channels)


def alexnet_blueprint(img_size: int, channels: int = 3) -> Blueprint:
    layers = [
        _conv(96, 11, 4, "valid"), MaxPool(3, 2),
        _conv(256, 5), MaxPool(3, 2),
        _conv(384), _conv(384), _conv(256), MaxPool(3, 2),
        Flatten(),
        Dense(4096, "relu"),
        Dense(4096, "relu"),
        Dense(1, "sigmoid"),
    ]
    return blueprint("alexnet", layers, img_size, channels)


def inception_v4_blueprint(img_size: int, channels: int = 3, include_top: bool = True) -> Blueprint:
    if img_size < 8:
        raise ModelConfigError(f"img_size {img_size} too small for inception-v4 (minimum 8)")
    layers: List[LayerSpec] = [_conv(32), _conv(32), _conv(64)]
    layers.extend(inception_block(f) for f in INCEPTION_V4_FILTERS)
    layers.append(MaxPool(3, 2, "same"))
    if include_top:
        layers.extend(_top(Flatten(), (256,)))
    return blueprint("inception-v4", layers, img_size, channels, {"include_top": include_top})


def densenet_mini_blueprint(
    img_size: int,
    blocks: int = 2,
    layers_per_block: int = 4,
    growth: int = 12,
    channels: int = 3,
    include_top: bool = True,
) -> Blueprint:
    for label, value in (("blocks", blocks), ("layers_per_block", layers_per_block), ("growth", growth)):
        if int(value) < 1:
            raise ModelConfigError(f"densenet-mini {label} must be positive, got {value}")

    c = 2 * growth
    layers: List[LayerSpec] = [_conv(c, activation=None)]
    for b in range(blocks):
        layers.extend(dense_layer(growth) for _ in range(layers_per_block))
        c += layers_per_block * growth
        if b < blocks - 1:
            layers.extend(transition(c))
            c //= 2
    if include_top:
        layers.extend(_top(GlobalAvgPool()))
    config = {
        "blocks": blocks,
        "layers_per_block": layers_per_block,
        "growth": growth,
        "include_top": include_top,
    }
    return blueprint("densenet-mini", layers, img_size, channels, config)


def vgg_mini_blueprint(
    img_size: int,
    stage_filters: Sequence[int] = (64, 128),
    head_units: Sequence[int] = (256,),
    channels: int = 3,
    include_top: bool = True,
) -> Blueprint:
    stage_filters = [int(f) for f in stage_filters]
    head_units = [int(u) for u in head_units]
    if not stage_filters:
        raise ModelConfigError("vgg-mini needs at least one stage")
    if min(stage_filters) < 1 or (head_units and min(head_units) < 1):
        raise ModelConfigError("vgg-mini filter and unit counts must be positive")

    layers: List[LayerSpec] = []
    for f in stage_filters:
        layers.extend([_conv(f), _conv(f), MaxPool(2, 2)])
    if include_top:
        layers.extend(_top(Flatten(), head_units))
    config = {"stage_filters": stage_filters, "head_units": head_units, "include_top": include_top}
    return blueprint("vgg-mini", layers, img_size, channels, config)


def head_blueprint(
    base: Blueprint,
    pool: str,
    head_units: Sequence[int],
    dropout_rate: Optional[float] = None,
    freeze_base: bool = True,
) -> Blueprint:
    """Blueprint of `base` followed by pool -> Dense(u, relu)... -> Dense(1, sigmoid)."""
    if pool not in POOLS:
        raise ModelConfigError(f"pool must be one of {POOLS}, got {pool!r}")
    trace = base.shape_trace()
    if trace and len(trace[-1].output_shape) != 3:
        raise ModelConfigError(f"{base.name} already ends in a flat layer; a head needs a spatial base")

    used: set = set()
    _collect_names(base.layers, used)
    pool_spec = Flatten() if pool == "flatten" else GlobalAvgPool()
    head = _name_layers(_top(pool_spec, head_units, dropout_rate), used)
    layers = list(base.layers) + head
    _check_trace(base.name, layers, base.input_shape)

    config = dict(base.config)
    config.update(head_pool=pool, head_units=[int(u) for u in head_units], head_dropout=dropout_rate)
    frozen = len(base.layers) if freeze_base else base.frozen_prefix
    return Blueprint(base.name, layers, base.input_shape, frozen, config)


# ============================================================
# Builders
# ============================================================


def build_custom_cnn(img_size: int, channels: int = 1, seed: int = 0) -> Network:
    return allocate(custom_cnn_blueprint(img_size, channels), seed)


def build_alexnet(img_size: int, channels: int = 3, seed: int = 0) -> Network:
    return allocate(alexnet_blueprint(img_size, channels), seed)


def build_inception_v4(
    img_size: int, channels: int = 3, seed: int = 0, include_top: bool = True
) -> Network:
    return allocate(inception_v4_blueprint(img_size, channels, include_top), seed)


def build_densenet_mini(
    img_size: int,
    blocks: int = 2,
    layers_per_block: int = 4,
    growth: int = 12,
    channels: int = 3,
    seed: int = 0,
    include_top: bool = True,
) -> Network:
    bp = densenet_mini_blueprint(img_size, blocks, layers_per_block, growth, channels, include_top)
    return allocate(bp, seed)


def build_vgg_mini(
    img_size: int,
    stage_filters: Sequence[int] = (64, 128),
    head_units: Sequence[int] = (256,),
    channels: int = 3,
    seed: int = 0,
    include_top: bool = True,
) -> Network:
    return allocate(vgg_mini_blueprint(img_size, stage_filters, head_units, channels, include_top), seed)


def attach_head(
    base: Network,
    pool: str,
    head_units: Sequence[int],
    dropout_rate: Optional[float] = None,
    freeze_base: bool = True,
    seed: int = 0,
) -> Network:
    """
    Append a classifier head to a spatial base network.

    The result takes ownership of the base's layer states. With freeze_base
    every base parameter is marked non-trainable and the base always runs in
    eval mode.
    """
    base_bp = Blueprint(base.name, list(base.layers), base.input_shape, base.frozen_prefix, dict(base.config))
    bp = head_blueprint(base_bp, pool, head_units, dropout_rate, freeze_base)
    head_layers = bp.layers[len(base.layers):]

    trace = base.shape_trace()
    shape: Tuple[int, ...] = trace[-1].output_shape if trace else _chw(base.input_shape)
    head_states = []
    for i, spec in enumerate(head_layers):
        head_states.append(L.init_params(spec, shape, L.derive_seed(seed, len(base.layers) + i)))
        shape = L.output_shape(spec, shape)

    if freeze_base:
        for state in base.states:
            L.set_trainable(state, False)
            L.set_mode(state, "eval")

    return Network(bp.name, bp.layers, list(base.states) + head_states, bp.input_shape, bp.frozen_prefix, bp.config)


_BLUEPRINTS = {
    "cnn": custom_cnn_blueprint,
    "alexnet": alexnet_blueprint,
    "inception-v4": inception_v4_blueprint,
    "densenet-mini": densenet_mini_blueprint,
    "vgg-mini": vgg_mini_blueprint,
}


def model_blueprint(
    name: str,
    img_size: int,
    head: Optional[str] = None,
    channels: Optional[int] = None,
    **kwargs,
) -> Blueprint:
    """Blueprint for a zoo model by CLI name, optionally a frozen base with a preset head."""
    if name not in MODEL_NAMES:
        raise UsageError(f"unknown model {name!r}; valid models: {', '.join(MODEL_NAMES)}")
    if channels is not None:
        kwargs["channels"] = channels
    if head is None:
        return _BLUEPRINTS[name](img_size, **kwargs)

    if name not in HEAD_MODELS:
        raise ModelConfigError(f"--head is only valid for {', '.join(HEAD_MODELS)}, not {name}")
    if head not in HEAD_PRESETS:
        raise UsageError(f"unknown head {head!r}; valid heads: {', '.join(HEAD_PRESETS)}")
    preset = HEAD_PRESETS[head]
    base = _BLUEPRINTS[name](img_size, include_top=False, **kwargs)
    bp = head_blueprint(base, preset.pool, preset.units, preset.dropout, freeze_base=True)
    bp.config["head"] = head
    return bp


def build_model(
    name: str,
    img_size: int,
    head: Optional[str] = None,
    channels: Optional[int] = None,
    seed: int = 0,
    **kwargs,
) -> Network:
    return allocate(model_blueprint(name, img_size, head, channels, **kwargs), seed)


def layer_census(layers: Sequence[LayerSpec]) -> Dict[str, int]:
    """How many layers of each kind, counting inside branches."""
    counts: Dict[str, int] = {}
    for spec in layers:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        if isinstance(spec, Branch):
            for chain in spec.chains:
                for kind, n in layer_census(chain).items():
                    counts[kind] = counts.get(kind, 0) + n
    return counts

"""
Layer descriptors, parameter initialization, and stateful forward passes.

A LayerSpec is an immutable description of one layer. Its LayerState holds
the named parameter tensors, the train/eval mode and (for dropout) the random
stream. Shapes passed around here are per-sample: (C, H, W) for feature maps
and (F,) for flat vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Any, ClassVar, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

MODES = ("train", "eval")

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

Shape = Tuple[int, ...]


def _as_pair(value: Union[int, Sequence[int]]) -> Tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    a, b = value
    return (int(a), int(b))


def _check_activation(activation: Optional[str]) -> None:
    if activation is not None and activation not in T.ACTIVATIONS:
        raise ShapeError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: str = "same"
    activation: Optional[str] = None
    name: str = ""

    kind: ClassVar[str] = "conv2d"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel", _as_pair(self.kernel))
        object.__setattr__(self, "stride", _as_pair(self.stride))
        if self.filters < 1:
            raise ShapeError(f"Conv2D filters must be positive, got {self.filters}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeError("Conv2D kernel and stride must be positive")
        if self.padding not in T.PADDINGS:
            raise ShapeError(f"Conv2D padding must be one of {T.PADDINGS}")
        _check_activation(self.activation)


@dataclass(frozen=True)
class _Pool:
    window: Tuple[int, int] = (2, 2)
    stride: Optional[Tuple[int, int]] = None
    padding: str = "valid"
    name: str = ""

    mode: ClassVar[str] = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "window", _as_pair(self.window))
        stride = self.window if self.stride is None else _as_pair(self.stride)
        object.__setattr__(self, "stride", stride)
        if min(self.window) < 1 or min(stride) < 1:
            raise ShapeError("pool window and stride must be positive")
        if self.padding not in T.PADDINGS:
            raise ShapeError(f"pool padding must be one of {T.PADDINGS}")


@dataclass(frozen=True)
class MaxPool(_Pool):
    kind: ClassVar[str] = "max_pool"
    mode: ClassVar[str] = "max"


@dataclass(frozen=True)
class AvgPool(_Pool):
    kind: ClassVar[str] = "avg_pool"
    mode: ClassVar[str] = "avg"


@dataclass(frozen=True)
class Dense:
    units: int
    activation: Optional[str] = None
    name: str = ""

    kind: ClassVar[str] = "dense"

    def __post_init__(self) -> None:
        if self.units < 1:
            raise ShapeError(f"Dense units must be positive, got {self.units}")
        _check_activation(self.activation)


@dataclass(frozen=True)
class Flatten:
    name: str = ""

    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class Dropout:
    rate: float
    name: str = ""

    kind: ClassVar[str] = "dropout"

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ShapeError(f"Dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class BatchNorm:
    name: str = ""
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    kind: ClassVar[str] = "batch_norm"


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str = ""

    kind: ClassVar[str] = "global_avg_pool"


@dataclass(frozen=True)
class Activation:
    fn: str
    name: str = ""

    kind: ClassVar[str] = "activation"

    def __post_init__(self) -> None:
        if self.fn not in T.ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.fn!r}")


@dataclass(frozen=True)
class Branch:
    """Parallel chains over the same input, merged by channel concat. An empty chain is the identity."""

    chains: Tuple[Tuple["LayerSpec", ...], ...]
    name: str = ""

    kind: ClassVar[str] = "branch"

    def __post_init__(self) -> None:
        chains = tuple(tuple(chain) for chain in self.chains)
        object.__setattr__(self, "chains", chains)
        if len(chains) < 2:
            raise ShapeError(f"Branch needs at least 2 chains, got {len(chains)}")


LayerSpec = Union[
    Conv2D, MaxPool, AvgPool, Dense, Flatten, Dropout, BatchNorm, GlobalAvgPool, Activation, Branch
]

SPEC_TYPES: Dict[str, type] = {
    cls.kind: cls
    for cls in (Conv2D, MaxPool, AvgPool, Dense, Flatten, Dropout, BatchNorm, GlobalAvgPool, Activation, Branch)
}

PARAMETERIZED = (Conv2D, Dense, BatchNorm)


@dataclass
class LayerState:
    params: Dict[str, Tensor] = field(default_factory=dict)
    mode: str = "eval"
    rng: Optional[np.random.Generator] = None
    children: List[List["LayerState"]] = field(default_factory=list)


# ============================================================
# Shape propagation
# ============================================================


def _spatial(spec: LayerSpec, input_shape: Shape) -> Tuple[int, int, int]:
    if len(input_shape) != 3:
        raise ShapeError(
            f"{spec.kind} layer {spec.name!r} expects a (C, H, W) input, got {tuple(input_shape)}"
        )
    return input_shape  # type: ignore[return-value]


def output_shape(spec: LayerSpec, input_shape: Shape) -> Shape:
    """Per-sample output shape of `spec` applied to `input_shape`."""
    input_shape = tuple(int(d) for d in input_shape)

    if isinstance(spec, Conv2D):
        _, h, w = _spatial(spec, input_shape)
        try:
            _, _, ho = T.padded_extent(h, spec.kernel[0], spec.stride[0], spec.padding)
            _, _, wo = T.padded_extent(w, spec.kernel[1], spec.stride[1], spec.padding)
        except ShapeError as e:
            raise ShapeError(f"layer {spec.name!r}: {e}") from e
        return (spec.filters, ho, wo)

    if isinstance(spec, _Pool):
        c, h, w = _spatial(spec, input_shape)
        try:
            _, _, ho = T.padded_extent(h, spec.window[0], spec.stride[0], spec.padding)
            _, _, wo = T.padded_extent(w, spec.window[1], spec.stride[1], spec.padding)
        except ShapeError as e:
            raise ShapeError(f"layer {spec.name!r}: {e}") from e
        return (c, ho, wo)

    if isinstance(spec, Dense):
        if len(input_shape) != 1:
            raise ShapeError(
                f"dense layer {spec.name!r} expects a flat input, got {input_shape}"
            )
        return (spec.units,)

    if isinstance(spec, Flatten):
        return (int(np.prod(input_shape)),)

    if isinstance(spec, GlobalAvgPool):
        c, _, _ = _spatial(spec, input_shape)
        return (c,)

    if isinstance(spec, (Dropout, Activation)):
        return input_shape

    if isinstance(spec, BatchNorm):
        if len(input_shape) not in (1, 3):
            raise ShapeError(f"batch_norm layer {spec.name!r}: unsupported input {input_shape}")
        return input_shape

    if isinstance(spec, Branch):
        _, h, w = _spatial(spec, input_shape)
        channels = 0
        for chain in spec.chains:
            shape = input_shape
            for child in chain:
                shape = output_shape(child, shape)
            if len(shape) != 3 or shape[1:] != (h, w):
                raise ShapeError(
                    f"branch {spec.name!r}: chain output {shape} does not keep spatial dims {(h, w)}"
                )
            channels += shape[0]
        return (channels, h, w)

    raise ShapeError(f"unknown layer spec {spec!r}")


def count_params(spec: LayerSpec, input_shape: Shape, include_buffers: bool = False) -> int:
    """Closed-form parameter count of `spec` on `input_shape`."""
    if isinstance(spec, Conv2D):
        c = _spatial(spec, input_shape)[0]
        return spec.filters * (c * spec.kernel[0] * spec.kernel[1] + 1)
    if isinstance(spec, Dense):
        return spec.units * (int(input_shape[0]) + 1)
    if isinstance(spec, BatchNorm):
        c = int(input_shape[0])
        return 4 * c if include_buffers else 2 * c
    if isinstance(spec, Branch):
        total = 0
        for chain in spec.chains:
            shape = tuple(input_shape)
            for child in chain:
                total += count_params(child, shape, include_buffers)
                shape = output_shape(child, shape)
        return total
    return 0


# ============================================================
# Initialization
# ============================================================


def derive_seed(seed: int, *path: int) -> int:
    """Stable child seed for position `path` under `seed`."""
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1)[0])


def _uniform(rng: np.random.Generator, limit: float, shape: Shape) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(T.get_dtype())


def _limit(activation: Optional[str], fan_in: int, fan_out: int) -> float:
    if activation == "relu":
        return float(np.sqrt(6.0 / fan_in))
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: LayerSpec, input_shape: Shape, rng_seed: int) -> LayerState:
    """
    Create the LayerState for `spec` on a per-sample `input_shape`.

    He-uniform for ReLU-activated layers, Glorot-uniform otherwise; zero
    biases; batch-norm scale 1, shift 0, running mean 0, running var 1.
    Deterministic given `rng_seed`.
    """
    output_shape(spec, input_shape)
    rng = np.random.default_rng(rng_seed)
    state = LayerState()
    dtype = T.get_dtype()

    def param(key: str, data: np.ndarray, trainable: bool = True) -> None:
        state.params[key] = Tensor(data, trainable=trainable, name=f"{spec.name}/{key}")

    if isinstance(spec, Conv2D):
        c = input_shape[0]
        kh, kw = spec.kernel
        limit = _limit(spec.activation, c * kh * kw, spec.filters * kh * kw)
        param("kernel", _uniform(rng, limit, (spec.filters, c, kh, kw)))
        param("bias", np.zeros(spec.filters, dtype=dtype))
    elif isinstance(spec, Dense):
        fan_in = int(input_shape[0])
        limit = _limit(spec.activation, fan_in, spec.units)
        param("weight", _uniform(rng, limit, (fan_in, spec.units)))
        param("bias", np.zeros(spec.units, dtype=dtype))
    elif isinstance(spec, BatchNorm):
        c = int(input_shape[0])
        param("gamma", np.ones(c, dtype=dtype))
        param("beta", np.zeros(c, dtype=dtype))
        param("running_mean", np.zeros(c, dtype=dtype), trainable=False)
        param("running_var", np.ones(c, dtype=dtype), trainable=False)
    elif isinstance(spec, Dropout):
        state.rng = rng
    elif isinstance(spec, Branch):
        for i, chain in enumerate(spec.chains):
            shape = tuple(input_shape)
            chain_states = []
            for j, child in enumerate(chain):
                chain_states.append(init_params(child, shape, derive_seed(rng_seed, i, j)))
                shape = output_shape(child, shape)
            state.children.append(chain_states)
    return state


def reseed(spec: LayerSpec, state: LayerState, seed: int) -> None:
    """Reset every dropout stream under this layer from `seed`."""
    if isinstance(spec, Dropout):
        state.rng = np.random.default_rng(seed)
    elif isinstance(spec, Branch):
        for i, (chain, states) in enumerate(zip(spec.chains, state.children)):
            for j, (child, child_state) in enumerate(zip(chain, states)):
                reseed(child, child_state, derive_seed(seed, i, j))


# ============================================================
# Forward
# ============================================================


def _run_chain(
    chain: Sequence[LayerSpec],
    states: Sequence[LayerState],
    x: Tensor,
    tape: Optional[GradTape],
) -> Tensor:
    for child, child_state in zip(chain, states):
        x = forward(child, child_state, x, tape)
    return x


def forward(
    spec: LayerSpec,
    state: LayerState,
    x: Tensor,
    tape: Optional[GradTape] = None,
) -> Tensor:
    """Apply one layer to a batch. Train-mode dropout and batch norm mutate `state`."""
    output_shape(spec, x.shape[1:])
    p = state.params

    if isinstance(spec, Conv2D):
        if p["kernel"].shape[1] != x.shape[1]:
            raise ShapeError(
                f"layer {spec.name!r}: kernel expects {p['kernel'].shape[1]} channels, got {x.shape[1]}"
            )
        out = T.conv2d(x, p["kernel"], p["bias"], spec.stride, spec.padding, tape)
        return T.activate(out, spec.activation, tape) if spec.activation else out

    if isinstance(spec, _Pool):
        return T.pool2d(x, spec.mode, spec.window, spec.stride, spec.padding, tape)

    if isinstance(spec, Dense):
        if p["weight"].shape[0] != x.shape[1]:
            raise ShapeError(
                f"layer {spec.name!r}: weight expects {p['weight'].shape[0]} inputs, got {x.shape[1]}"
            )
        out = T.add(T.matmul(x, p["weight"], tape), p["bias"], tape)
        return T.activate(out, spec.activation, tape) if spec.activation else out

    if isinstance(spec, Flatten):
        return T.flatten(x, tape)

    if isinstance(spec, GlobalAvgPool):
        return T.global_avg_pool(x, tape)

    if isinstance(spec, Activation):
        return T.activate(x, spec.fn, tape)

    if isinstance(spec, Dropout):
        if state.mode != "train" or spec.rate == 0.0:
            return x
        if state.rng is None:
            state.rng = np.random.default_rng(0)
        return T.dropout(x, spec.rate, state.rng, tape)

    if isinstance(spec, BatchNorm):
        running_mean = p["running_mean"]
        running_var = p["running_var"]
        if state.mode == "train":
            out, mu, var = T.batch_norm(x, p["gamma"], p["beta"], eps=spec.epsilon, tape=tape)
            m = spec.momentum
            running_mean.data = (m * running_mean.data + (1 - m) * mu).astype(running_mean.data.dtype)
            running_var.data = (m * running_var.data + (1 - m) * var).astype(running_var.data.dtype)
            return out
        out, _, _ = T.batch_norm(
            x, p["gamma"], p["beta"], running_mean.data, running_var.data, spec.epsilon, tape
        )
        return out

    if isinstance(spec, Branch):
        outs = [
            _run_chain(chain, states, x, tape)
            for chain, states in zip(spec.chains, state.children)
        ]
        return T.concat(outs, axis=1, tape=tape)

    raise ShapeError(f"unknown layer spec {spec!r}")


def set_mode(state: LayerState, mode: str) -> LayerState:
    """Switch train/eval for this state and every nested child. Parameters are untouched."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    state.mode = mode
    for chain in state.children:
        for child in chain:
            set_mode(child, mode)
    return state


# ============================================================
# Parameter enumeration
# ============================================================


def named_tensors(state: LayerState) -> Iterator[Tuple[str, Tensor]]:
    """Every tensor (parameters and buffers) owned by `state`, in a stable order."""
    for key in sorted(state.params):
        tensor = state.params[key]
        yield tensor.name, tensor
    for chain in state.children:
        for child in chain:
            yield from named_tensors(child)


def trainable_parameters(state: LayerState) -> List[Tensor]:
    return [t for _, t in named_tensors(state) if t.trainable]


def set_trainable(state: LayerState, trainable: bool) -> None:
    """Flip the trainable flag of every learnable parameter (buffers stay frozen)."""
    for name, tensor in named_tensors(state):
        if not name.endswith(("/running_mean", "/running_var")):
            tensor.trainable = trainable


# ============================================================
# Descriptor (de)serialization
# ============================================================


def spec_to_dict(spec: LayerSpec) -> Dict[str, Any]:
    out: Dict[str, Any] = {"kind": spec.kind}
    for f in fields(spec):
        value = getattr(spec, f.name)
        if isinstance(spec, Branch) and f.name == "chains":
            value = [[spec_to_dict(child) for child in chain] for chain in value]
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def spec_from_dict(payload: Dict[str, Any]) -> LayerSpec:
    data = dict(payload)
    kind = data.pop("kind", None)
    cls = SPEC_TYPES.get(kind)
    if cls is None:
        raise ShapeError(f"unknown layer kind {kind!r}")
    if cls is Branch:
        data["chains"] = tuple(
            tuple(spec_from_dict(child) for child in chain) for chain in data["chains"]
        )
    for key, value in list(data.items()):
        if isinstance(value, list):
            data[key] = tuple(value)
    try:
        return cls(**data)
    except TypeError as e:
        raise ShapeError(f"bad {kind} descriptor: {e}") from e

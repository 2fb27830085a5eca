"""
Binary checkpoint format.

    magic      b"MGCN"
    version    u32 LE
    descriptor u32 LE length + UTF-8 JSON (architecture, sorted keys)
    count      u32 LE number of tensors
    per tensor u32 length + UTF-8 name, u32 rank, rank x u32 dims, raw <f4 data

Every named tensor is stored, batch-norm running statistics included, so a
round trip reproduces scores bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from . import layers as L
from .errors import CheckpointError, ShapeError
from .tensor import get_dtype
from .zoo import Network, init_states

logger = logging.getLogger(__name__)

MAGIC = b"MGCN"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


def describe(net: Network) -> Dict[str, Any]:
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "frozen_prefix": net.frozen_prefix,
        "layers": [L.spec_to_dict(spec) for spec in net.layers],
        "config": net.config,
    }


def descriptor_json(net: Network) -> str:
    return json.dumps(describe(net), sort_keys=True, separators=(",", ":"))


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode(net: Network) -> bytes:
    tensors = net.named_tensors()
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _pack_str(descriptor_json(net)), _U32.pack(len(tensors))]
    for name, tensor in tensors:
        parts.append(_pack_str(name))
        parts.append(_U32.pack(tensor.ndim))
        parts.extend(_U32.pack(d) for d in tensor.shape)
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save(net: Network, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(net))
    logger.info(f"[Checkpoint] Saved {net.name} ({len(net.named_tensors())} tensors) to {path}")
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{self.source}: corrupt string at offset {self.pos}") from e


def decode(buf: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    """Split a checkpoint into its descriptor and (name, array) pairs."""
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not an mgcn checkpoint (bad magic bytes)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        descriptor = json.loads(r.text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{source}: corrupt architecture descriptor: {e}") from e

    tensors = []
    for _ in range(r.u32()):
        name = r.text()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors.append((name, data))
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after last tensor")
    return descriptor, tensors


def _layer_of(name: str) -> str:
    return name.rsplit("/", 1)[0]


def assign(net: Network, tensors: List[Tuple[str, np.ndarray]], source: str) -> None:
    """Copy saved arrays into `net` by name; any disagreement names the layer."""
    targets = dict(net.named_tensors())
    seen = set()
    for name, data in tensors:
        target = targets.get(name)
        if target is None:
            raise CheckpointError(f"{source}: layer {_layer_of(name)!r} has no tensor {name!r} in {net.name}")
        if tuple(target.shape) != tuple(data.shape):
            raise CheckpointError(
                f"{source}: layer {_layer_of(name)!r} shape mismatch for {name!r}: "
                f"checkpoint {tuple(data.shape)} vs architecture {tuple(target.shape)}"
            )
        seen.add(name)
    missing = sorted(set(targets) - seen)
    if missing:
        raise CheckpointError(f"{source}: layer {_layer_of(missing[0])!r} missing tensor {missing[0]!r}")
    for name, data in tensors:
        targets[name].data = data.astype(get_dtype())


def load(path: Union[str, Path]) -> Network:
    """Rebuild the saved Network, weights and frozen prefix included."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    descriptor, tensors = decode(buf, str(path))

    try:
        layers = [L.spec_from_dict(d) for d in descriptor["layers"]]
        input_shape = tuple(int(d) for d in descriptor["input_shape"])
        frozen_prefix = int(descriptor["frozen_prefix"])
        states = init_states(layers, input_shape, 0)
        net = Network(
            descriptor["name"], layers, states, input_shape, frozen_prefix, dict(descriptor.get("config", {}))
        )
    except (KeyError, TypeError, ValueError, ShapeError) as e:
        raise CheckpointError(f"{path}: invalid architecture descriptor: {e}") from e

    for state in net.states[:frozen_prefix]:
        L.set_trainable(state, False)
    assign(net, tensors, str(path))
    logger.info(f"[Checkpoint] Loaded {net.name} from {path}")
    return net


def load_weights(net: Network, path: Union[str, Path]) -> Network:
    """Load saved tensors into an already built network of the same architecture."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    _, tensors = decode(buf, str(path))
    assign(net, tensors, str(path))
    return net

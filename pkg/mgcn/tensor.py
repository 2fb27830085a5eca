"""
Dense tensors, the forward kernels every layer needs, and reverse-mode
automatic differentiation over a recorded tape.

Layout is N,C,H,W throughout. "Convolution" is cross-correlation (no kernel
flip). `same` padding is asymmetric: the extra row/column goes bottom/right.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "sigmoid")
POOL_MODES = ("max", "avg")

_dtype = np.dtype(np.float32)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = previous


def get_dtype() -> np.dtype:
    return _dtype


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        flag = ", trainable" if self.trainable else ""
        return f"Tensor{label}(shape={self.shape}{flag})"


# ============================================================
# Gradient tape
# ============================================================

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class GradTape:
    """Ordered record of executed operations. One tape per training step."""

    def __init__(self) -> None:
        self._entries: List[TapeEntry] = []

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: BackwardFn,
    ) -> None:
        self._entries.append(TapeEntry(op, tuple(inputs), output, backward))

    @property
    def entries(self) -> List[TapeEntry]:
        return self._entries

    def produced(self, tensor: Tensor) -> bool:
        return any(entry.output is tensor for entry in self._entries)

    def reset(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


def backward(loss: Tensor, tape: GradTape) -> None:
    """
    Replay the tape in reverse and accumulate d(loss)/d(tensor) into the
    `grad` buffer of every trainable tensor the loss depends on.

    Trainable tensors that appear on the tape but receive no gradient get a
    zero buffer. Non-trainable tensors are never written.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced by an operation on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    trainables: Dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        out = entry.output
        if out.trainable:
            upstream = grads.get(id(out))
        else:
            upstream = grads.pop(id(out), None)
        if upstream is None:
            continue
        input_grads = entry.backward(upstream)
        for tensor, g in zip(entry.inputs, input_grads):
            if tensor.trainable:
                trainables[id(tensor)] = tensor
            if g is None:
                continue
            if g.shape != tensor.shape:
                g = g.reshape(tensor.shape)
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    for entry in tape.entries:
        for tensor in entry.inputs:
            if tensor.trainable:
                trainables.setdefault(id(tensor), tensor)

    for key, tensor in trainables.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(tensor.data)
        g = np.asarray(g, dtype=tensor.data.dtype)
        if tensor.grad is None:
            tensor.grad = g.copy()
        else:
            tensor.grad = tensor.grad + g


def _emit(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    tape: Optional[GradTape],
    backward_fn: BackwardFn,
) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


# ============================================================
# Shape helpers
# ============================================================


def _pair(value, what: str) -> Tuple[int, int]:
    if isinstance(value, int):
        value = (value, value)
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ShapeError(f"{what} must be an int pair, got {value!r}")
    return pair  # type: ignore[return-value]


def padded_extent(size: int, window: int, stride: int, padding: str) -> Tuple[int, int, int]:
    """
    Return (pad_before, pad_after, output_size) along one spatial axis.

    `valid`: no padding, floor((size - window) / stride) + 1.
    `same`: ceil(size / stride) outputs, padding split with the odd cell last.
    """
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding not in PADDINGS:
        raise ShapeError(f"padding must be one of {PADDINGS}, got {padding!r}")
    if padding == "valid":
        if window > size:
            raise ShapeError(f"window {window} larger than input extent {size}")
        return 0, 0, (size - window) // stride + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    return total // 2, total - total // 2, out


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) strided view over a padded N,C,H,W array."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _require_rank(t: Tensor, rank: int, op: str, what: str = "input") -> None:
    if t.ndim != rank:
        raise ShapeError(f"{op}: {what} must be rank {rank}, got shape {t.shape}")


# ============================================================
# Convolution
# ============================================================


@dataclass
class _ConvSaved:
    cols: np.ndarray
    wmat: np.ndarray
    x_shape: Tuple[int, ...]
    padded_shape: Tuple[int, ...]
    pads: Tuple[int, int]
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    out_hw: Tuple[int, int]


def _conv2d_grads(
    g: np.ndarray, saved: _ConvSaved
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, kernels and bias."""
    n, o, ho, wo = g.shape
    kh, kw = saved.kernel
    sh, sw = saved.stride
    c = saved.x_shape[1]

    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (gm.T @ saved.cols).reshape(o, c, kh, kw)
    db = g.sum(axis=(0, 2, 3))

    dcols = (gm @ saved.wmat).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(saved.padded_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    top, left = saved.pads
    h, w = saved.x_shape[2], saved.x_shape[3]
    dx = dxp[:, :, top : top + h, left : left + w]
    return dx, dw, db


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    stride=(1, 1),
    padding: str = "valid",
    tape: Optional[GradTape] = None,
) -> Tensor:
    """2-D cross-correlation via im2col + matmul."""
    _require_rank(x, 4, "conv2d")
    _require_rank(kernels, 4, "conv2d", "kernels")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    sh, sw = _pair(stride, "stride")
    top, bottom, ho = padded_extent(h, kh, sh, padding)
    left, right, wo = padded_extent(w, kw, sw, padding)

    xp = x.data
    if top or bottom or left or right:
        xp = np.pad(xp, ((0, 0), (0, 0), (top, bottom), (left, right)))
    win = _windows(xp, kh, kw, sh, sw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    saved = _ConvSaved(
        cols=cols,
        wmat=wmat,
        x_shape=x.shape,
        padded_shape=xp.shape,
        pads=(top, left),
        kernel=(kh, kw),
        stride=(sh, sw),
        out_hw=(ho, wo),
    )

    def backward_fn(g: np.ndarray):
        return _conv2d_grads(g, saved)

    return _emit("conv2d", out, (x, kernels, bias), tape, backward_fn)


def conv2d_reference(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    stride=(1, 1),
    padding: str = "valid",
) -> np.ndarray:
    """Naive loop cross-correlation, kept as the oracle for `conv2d`."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    sh, sw = _pair(stride, "stride")
    top, bottom, ho = padded_extent(h, kh, sh, padding)
    left, right, wo = padded_extent(w, kw, sw, padding)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (top, bottom), (left, right)))
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = float(bias[f])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * sh + u, j * sw + v] * kernels[f, ch, u, v]
                    out[b, f, i, j] = acc
    return out


# ============================================================
# Pooling
# ============================================================


def pool2d(
    x: Tensor,
    mode: str,
    window,
    stride,
    padding: str = "valid",
    tape: Optional[GradTape] = None,
) -> Tensor:
    """
    Max or average pooling.

    Max pooling pads with -inf and routes gradients to the first maximum in
    row-major window order. Average pooling ignores padded cells.
    """
    if mode not in POOL_MODES:
        raise ShapeError(f"pool2d: mode must be one of {POOL_MODES}, got {mode!r}")
    _require_rank(x, 4, "pool2d")
    n, c, h, w = x.shape
    kh, kw = _pair(window, "window")
    sh, sw = _pair(stride, "stride")
    top, bottom, ho = padded_extent(h, kh, sh, padding)
    left, right, wo = padded_extent(w, kw, sw, padding)
    pads = ((0, 0), (0, 0), (top, bottom), (left, right))
    padded = bool(top or bottom or left or right)

    if mode == "max":
        xp = np.pad(x.data, pads, constant_values=-np.inf) if padded else x.data
        flat = _windows(xp, kh, kw, sh, sw).reshape(n, c, ho, wo, kh * kw)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward_fn(g: np.ndarray):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            bi, ci, oi, oj = np.indices((n, c, ho, wo), sparse=False)
            rows = oi * sh + idx // kw
            cols = oj * sw + idx % kw
            np.add.at(dxp, (bi, ci, rows, cols), g)
            return (dxp[:, :, top : top + h, left : left + w],)

        return _emit("max_pool2d", np.ascontiguousarray(out), (x,), tape, backward_fn)

    xp = np.pad(x.data, pads) if padded else x.data
    sums = _windows(xp, kh, kw, sh, sw).sum(axis=(-2, -1))
    if padded:
        ones = np.pad(np.ones((1, 1, h, w), dtype=x.data.dtype), pads)
        counts = _windows(ones, kh, kw, sh, sw).sum(axis=(-2, -1))
    else:
        counts = np.full((1, 1, ho, wo), kh * kw, dtype=x.data.dtype)
    out = sums / counts

    def backward_fn(g: np.ndarray):
        share = g / counts
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += share
        return (dxp[:, :, top : top + h, left : left + w],)

    return _emit("avg_pool2d", out, (x,), tape, backward_fn)


def global_avg_pool(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    _require_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _emit("global_avg_pool", out, (x,), tape, backward_fn)


# ============================================================
# Dense algebra
# ============================================================


def matmul(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    _require_rank(a, 2, "matmul", "left operand")
    _require_rank(b, 2, "matmul", "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward_fn(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", out, (a, b), tape, backward_fn)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Broadcasting elementwise sum."""
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), tape, backward_fn)


def mul(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Broadcasting elementwise product."""
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", out, (a, b), tape, backward_fn)


def reduce_sum(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g: np.ndarray):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=x.data.dtype),)

    return _emit("reduce_sum", out, (x,), tape, backward_fn)


def reshape(x: Tensor, shape: Sequence[int], tape: Optional[GradTape] = None) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e

    def backward_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), tape, backward_fn)


def flatten(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))), tape)


def concat(inputs: Sequence[Tensor], axis: int, tape: Optional[GradTape] = None) -> Tensor:
    """Concatenate along `axis`; every other dimension must agree."""
    if not inputs:
        raise ShapeError("concat: empty input list")
    ref = inputs[0].shape
    ndim = len(ref)
    ax = axis % ndim if ndim else axis
    for t in inputs[1:]:
        if len(t.shape) != ndim or any(
            t.shape[d] != ref[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: off-axis disagreement {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in inputs], axis=ax)
    offsets = np.cumsum([t.shape[ax] for t in inputs])[:-1]

    def backward_fn(g: np.ndarray):
        return np.split(g, offsets, axis=ax)

    return _emit("concat", out, tuple(inputs), tape, backward_fn)


# ============================================================
# Activations, normalization, dropout
# ============================================================


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x.astype(np.float64)))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    return np.clip(s, lo, hi)


def activate(x: Tensor, fn: str, tape: Optional[GradTape] = None) -> Tensor:
    """Elementwise relu or sigmoid. Sigmoid output stays strictly inside (0, 1)."""
    if fn == "relu":
        out = np.maximum(x.data, 0)

        def backward_fn(g: np.ndarray):
            return (g * (x.data > 0),)

        return _emit("relu", out, (x,), tape, backward_fn)

    if fn == "sigmoid":
        out = _sigmoid(x.data)

        def backward_fn(g: np.ndarray):
            return (g * out * (1 - out),)

        return _emit("sigmoid", out, (x,), tape, backward_fn)

    raise ShapeError(f"activate: unknown function {fn!r}, expected one of {ACTIVATIONS}")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: Optional[np.ndarray] = None,
    var: Optional[np.ndarray] = None,
    eps: float = 1e-5,
    tape: Optional[GradTape] = None,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Per-channel normalization over every axis except axis 1.

    With `mean`/`var` omitted the batch statistics are used (train mode);
    otherwise the given running statistics are (eval mode). Returns the
    output and the per-channel statistics that were applied.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: input must be rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    training = mean is None

    if training:
        mu = x.data.mean(axis=axes)
        sigma2 = x.data.var(axis=axes)
    else:
        mu = np.asarray(mean, dtype=x.data.dtype)
        sigma2 = np.asarray(var, dtype=x.data.dtype)
    inv = (1.0 / np.sqrt(sigma2 + eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.size // c

    def backward_fn(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if not training:
            return dxhat * inv.reshape(bshape), dgamma, dbeta
        dx = (inv.reshape(bshape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return dx, dgamma, dbeta

    return _emit("batch_norm", out, (x, gamma, beta), tape, backward_fn), mu, sigma2


def dropout(
    x: Tensor,
    rate: float,
    rng: np.random.Generator,
    tape: Optional[GradTape] = None,
) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    mask = keep / x.data.dtype.type(1.0 - rate)
    out = x.data * mask

    def backward_fn(g: np.ndarray):
        return (g * mask,)

    return _emit("dropout", out, (x,), tape, backward_fn)

"""
Binary cross-entropy, optimizers, and the epoch/batch training loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .data import Dataset, batches
from .errors import DivergenceError, NumericError, ShapeError, TapeError, UsageError
from .layers import derive_seed
from .metrics import MetricsReport
from .tensor import GradTape, Tensor, backward
from .zoo import Network

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise UsageError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.threshold < 1.0:
            raise UsageError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class PhaseResult:
    report: MetricsReport
    loss: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: PhaseResult
    validation: PhaseResult


@dataclass
class History:
    entries: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def final(self) -> EpochRecord:
        return self.entries[-1]


# ============================================================
# Loss
# ============================================================


def _clamped(scores: np.ndarray) -> np.ndarray:
    return np.clip(scores.astype(np.float64).reshape(-1), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_values(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = _clamped(np.asarray(scores))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_loss(scores: Tensor, labels: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Mean binary cross-entropy, recorded on `tape` so it can be differentiated."""
    if scores.size != labels.size:
        raise ShapeError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if scores.size == 0:
        raise ShapeError("bce_loss needs at least one score")

    n = scores.size
    value = bce_values(scores.data, labels.data).mean()
    out = Tensor(np.array(value))

    if tape is not None:
        p = _clamped(scores.data)
        y = labels.data.astype(np.float64).reshape(-1)

        def backward_fn(g: np.ndarray):
            dp = float(g.reshape(-1)[0]) * (p - y) / (p * (1.0 - p)) / n
            return (dp.reshape(scores.shape).astype(scores.data.dtype), None)

        tape.record("bce_loss", (scores, labels), out, backward_fn)
    return out


# ============================================================
# Optimizers
# ============================================================


class Optimizer:
    def __init__(self, params: Sequence[Tensor], learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate

    def _grads(self) -> List[Tuple[Tensor, np.ndarray]]:
        pairs = []
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise TapeError(f"trainable parameter {p.name!r} has no gradient")
            pairs.append((p, p.grad))
        return pairs

    def _update(self, index: int, p: Tensor, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self) -> None:
        """Apply one update to every trainable parameter, then clear all gradients."""
        pairs = self._grads()
        self._begin_step()
        for i, (p, g) in enumerate(pairs):
            p.data = (p.data - self._update(i, p, g)).astype(p.data.dtype)
        for p in self.params:
            p.grad = None

    def _begin_step(self) -> None:
        pass


class SGD(Optimizer):
    """p <- p - lr * g"""

    def _update(self, index: int, p: Tensor, g: np.ndarray) -> np.ndarray:
        return self.learning_rate * g


class Adam(Optimizer):
    """First/second-moment update with bias correction."""

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        super().__init__(params, learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def _begin_step(self) -> None:
        self.t += 1

    def _update(self, index: int, p: Tensor, g: np.ndarray) -> np.ndarray:
        key = id(p)
        m = self.m.get(key, np.zeros_like(g))
        v = self.v.get(key, np.zeros_like(g))
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.m[key] = m
        self.v[key] = v
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def make_optimizer(cfg: TrainConfig, params: Sequence[Tensor]) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)


# ============================================================
# Training and evaluation
# ============================================================


def _check_compatible(net: Network, ds: Dataset, what: str) -> None:
    if len(ds) == 0:
        raise ShapeError(f"{what} dataset is empty")
    h, w, c = net.input_shape
    shape = ds.records[0].pixels.shape
    if shape != (h, w, c):
        raise ShapeError(f"{what} images are {shape}, {net.name} expects {(h, w, c)}")


def score(net: Network, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode scores for every record, in dataset order."""
    net.set_mode("eval")
    out = [net.forward(x).data.reshape(-1) for x, _ in batches(ds, batch_size)]
    return np.concatenate(out)


def evaluate(net: Network, ds: Dataset, threshold: float = 0.5, batch_size: int = 64) -> Tuple[MetricsReport, float]:
    """Score every record once in eval mode; returns (metrics, mean bce)."""
    _check_compatible(net, ds, "evaluation")
    scores = score(net, ds, batch_size)
    labels = ds.labels
    cm = metrics.confusion(scores, labels, threshold)
    return metrics.report(cm), float(bce_values(scores, labels).mean())


def train(
    net: Network,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> History:
    """
    Mini-batch training with a seeded shuffle per epoch, then an eval-mode
    pass over both splits. Deterministic given cfg.seed. A non-finite loss
    aborts with DivergenceError.
    """
    _check_compatible(net, train_ds, "training")
    _check_compatible(net, val_ds, "validation")

    net.reseed(cfg.seed)
    optimizer = make_optimizer(cfg, net.parameters())
    tape = GradTape()
    history = History()

    logger.info(
        f"[Trainer] Training {net.name} for {cfg.epochs} epochs "
        f"({len(train_ds)} train / {len(val_ds)} validation, {cfg.optimizer} lr={cfg.learning_rate})"
    )

    for epoch in range(1, cfg.epochs + 1):
        net.set_mode("train")
        shuffle_seed = derive_seed(cfg.seed, epoch)
        for batch_no, (x, y) in enumerate(batches(train_ds, cfg.batch_size, shuffle_seed), start=1):
            tape.reset()
            try:
                scores = net.forward(x, tape)
            except NumericError as e:
                raise DivergenceError(epoch, batch_no, float("nan")) from e
            loss = bce_loss(scores, y, tape)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, batch_no, value)
            backward(loss, tape)
            optimizer.step()
            logger.debug(f"[Trainer] epoch {epoch} batch {batch_no} loss {value:.6f}")
        tape.reset()

        train_report, train_loss = evaluate(net, train_ds, cfg.threshold)
        val_report, val_loss = evaluate(net, val_ds, cfg.threshold)
        record = EpochRecord(
            epoch, PhaseResult(train_report, train_loss), PhaseResult(val_report, val_loss)
        )
        history.entries.append(record)
        logger.info(
            f"[Trainer] Epoch {epoch}/{cfg.epochs} - loss {train_loss:.4f} "
            f"acc {train_report.accuracy:.4f} - val_loss {val_loss:.4f} "
            f"val_acc {val_report.accuracy:.4f}"
        )
        if on_epoch is not None:
            on_epoch(record)

    return history

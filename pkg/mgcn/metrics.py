"""Confusion matrix and the five binary-classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet

import numpy as np

from .errors import ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "misclassification_rate")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    misclassification_rate: float
    degenerate_flags: FrozenSet[str] = field(default_factory=frozenset)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions (positive iff score >= threshold) against {0,1} labels."""
    s = np.asarray(getattr(scores, "data", scores), dtype=np.float64).reshape(-1)
    y = np.asarray(getattr(labels, "data", labels)).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if s.size == 0:
        raise ShapeError("cannot build a confusion matrix from zero instances")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")

    predicted = s >= threshold
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.count_nonzero(predicted & actual)),
        fp=int(np.count_nonzero(predicted & ~actual)),
        tn=int(np.count_nonzero(~predicted & ~actual)),
        fn=int(np.count_nonzero(~predicted & actual)),
    )


def _ratio(num: int, den: int, metric: str, flags: set) -> float:
    if den == 0:
        flags.add(metric)
        return 0.0
    return num / den


def report(cm: ConfusionMatrix) -> MetricsReport:
    """
    Accuracy, precision, recall, F1 and misclassification rate of `cm`.

    A metric whose denominator is zero is reported as 0.0 and named in
    degenerate_flags. accuracy + misclassification_rate is exactly 1.0: the
    larger of the two is divided out and the smaller is its complement,
    which is exact in binary floating point.
    """
    if cm.total == 0:
        raise ValueError("cannot report metrics for an empty confusion matrix")

    flags: set = set()
    correct = cm.tp + cm.tn
    wrong = cm.fp + cm.fn
    if correct >= wrong:
        accuracy = correct / cm.total
        misclassification = 1.0 - accuracy
    else:
        misclassification = wrong / cm.total
        accuracy = 1.0 - misclassification

    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    if precision + recall == 0.0:
        flags.add("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)

    return MetricsReport(accuracy, precision, recall, f1, misclassification, frozenset(flags))

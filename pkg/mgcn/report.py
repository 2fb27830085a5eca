"""
Plain-text tables and key=value files.

Tables render every metric at 4 decimals. key=value files carry the same
numbers at full precision (repr), one per line, so both views agree.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import DataError
from .metrics import METRIC_NAMES, MetricsReport
from .trainer import EpochRecord, History, PhaseResult

MODEL_LABELS = {
    "cnn": "CNN",
    "alexnet": "AlexNet",
    "inception-v4": "InceptionV4",
    "densenet-mini": "DenseNet-mini",
    "vgg-mini": "VGG-mini",
}

MODALITIES = {
    "ct": ("Performance Metrics for CT Scan Images", "Models", "Metrics", "Training Results", "Testing Results"),
    "xray": ("Performance Metrics for X-ray Images", "Model", "Metric", "Training Result", "Validation Result"),
}

LOSS_KINDS = ("bce", "misclassification")

PHASES = ("train", "validation")


def model_label(name: str, head: Optional[str] = None) -> str:
    label = MODEL_LABELS.get(name, name)
    return f"{label} ({head} head)" if head else label


def fmt(value: float) -> str:
    return f"{value:.4f}"


def render_table(headers: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    rows = [list(r) for r in rows]
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def line(cells: Sequence[str]) -> str:
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = [line(headers), "-+-".join("-" * w for w in widths)]
    out.extend(line(r) for r in rows)
    return "\n".join(out)


# ============================================================
# key=value files
# ============================================================


def dump_kv(items: Iterable[Tuple[str, object]]) -> str:
    lines = []
    for key, value in items:
        text = repr(value) if isinstance(value, float) else str(value)
        if "\n" in text:
            raise ValueError(f"value for {key} spans lines")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def load_kv(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"malformed key=value line: {line!r}")
        values[key.strip()] = value.strip()
    return values


def read_kv(path: Path) -> Dict[str, str]:
    try:
        return load_kv(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def phase_items(prefix: str, result: PhaseResult) -> List[Tuple[str, object]]:
    items: List[Tuple[str, object]] = [
        (f"{prefix}.{name}", float(getattr(result.report, name))) for name in METRIC_NAMES
    ]
    items.append((f"{prefix}.bce_loss", float(result.loss)))
    items.append((f"{prefix}.degenerate", ",".join(sorted(result.report.degenerate_flags))))
    return items


def history_items(history: History) -> List[Tuple[str, object]]:
    items: List[Tuple[str, object]] = [("epochs", len(history))]
    for record in history:
        items.extend(phase_items(f"epoch.{record.epoch}.train", record.train))
        items.extend(phase_items(f"epoch.{record.epoch}.validation", record.validation))
    return items


def _phase_from_kv(values: Mapping[str, str], prefix: str) -> PhaseResult:
    try:
        report = MetricsReport(
            *(float(values[f"{prefix}.{name}"]) for name in METRIC_NAMES),
            degenerate_flags=frozenset(f for f in values.get(f"{prefix}.degenerate", "").split(",") if f),
        )
        return PhaseResult(report, float(values[f"{prefix}.bce_loss"]))
    except (KeyError, ValueError) as e:
        raise DataError(f"history is missing or has a bad value for {prefix}: {e}") from e


def history_from_kv(values: Mapping[str, str]) -> History:
    try:
        epochs = int(values["epochs"])
    except (KeyError, ValueError) as e:
        raise DataError("history has no epoch count") from e
    history = History()
    for n in range(1, epochs + 1):
        history.entries.append(
            EpochRecord(
                n,
                _phase_from_kv(values, f"epoch.{n}.train"),
                _phase_from_kv(values, f"epoch.{n}.validation"),
            )
        )
    return history


# ============================================================
# Tables
# ============================================================


def loss_row(kind: str) -> str:
    return "Loss (BCE)" if kind == "bce" else "Loss (Misclassification)"


def _loss_value(result: PhaseResult, kind: str) -> float:
    return result.loss if kind == "bce" else result.report.misclassification_rate


def metric_rows(result: PhaseResult) -> List[Tuple[str, float]]:
    r = result.report
    return [
        ("Accuracy", r.accuracy),
        ("Loss (BCE)", result.loss),
        ("Misclassification Rate", r.misclassification_rate),
        ("Precision", r.precision),
        ("Recall", r.recall),
        ("F1 Score", r.f1),
    ]


def epoch_table(title: str, record: EpochRecord) -> str:
    """Training vs testing columns for one epoch, one row per metric."""
    train_rows = metric_rows(record.train)
    val_rows = metric_rows(record.validation)
    rows = [(name, fmt(t), fmt(v)) for (name, t), (_, v) in zip(train_rows, val_rows)]
    return f"{title}\n\n" + render_table(("Metrics", "Training Results", "Testing Results"), rows)


def evaluation_table(title: str, result: PhaseResult) -> str:
    rows = [(name, fmt(value)) for name, value in metric_rows(result)]
    return f"{title}\n\n" + render_table(("Metrics", "Results"), rows)


def evaluation_items(model: str, result: PhaseResult, phase: str = "evaluation") -> List[Tuple[str, object]]:
    items: List[Tuple[str, object]] = [
        (f"{model}.{name}.{phase}", float(getattr(result.report, name))) for name in METRIC_NAMES
    ]
    items.append((f"{model}.bce_loss.{phase}", float(result.loss)))
    return items


def compare_table(
    entries: Sequence[Tuple[str, EpochRecord]],
    modality: str = "ct",
    loss: str = "bce",
) -> str:
    """One section per model: Accuracy, Precision, Recall and Loss rows, training vs testing."""
    caption, *headers = MODALITIES[modality]
    rows = []
    for label, record in entries:
        values = [
            ("Accuracy", record.train.report.accuracy, record.validation.report.accuracy),
            ("Precision", record.train.report.precision, record.validation.report.precision),
            ("Recall", record.train.report.recall, record.validation.report.recall),
            (loss_row(loss), _loss_value(record.train, loss), _loss_value(record.validation, loss)),
        ]
        for i, (metric, train, val) in enumerate(values):
            rows.append((label if i == 0 else "", metric, fmt(train), fmt(val)))
    return f"{caption}\n\n" + render_table(headers, rows)


def compare_items(
    entries: Sequence[Tuple[str, EpochRecord, int]],
    loss: str = "bce",
) -> List[Tuple[str, object]]:
    """model.metric.phase=value lines for every compared run."""
    items: List[Tuple[str, object]] = []
    for key, record, params in entries:
        items.append((f"{key}.params", params))
        for phase, result in zip(PHASES, (record.train, record.validation)):
            for name in ("accuracy", "precision", "recall"):
                items.append((f"{key}.{name}.{phase}", float(getattr(result.report, name))))
            metric = "bce_loss" if loss == "bce" else "misclassification_rate"
            items.append((f"{key}.{metric}.{phase}", float(_loss_value(result, loss))))
    return items


def summary_table(title: str, trace: Sequence, total: int, trainable: int) -> str:
    """Layer-by-layer output shapes and parameter counts."""
    rows = []
    for row in trace:
        shape = "x".join(str(d) for d in (row.output_shape[1:] + row.output_shape[:1]
                                           if len(row.output_shape) == 3 else row.output_shape))
        rows.append((f"{row.name} ({row.kind})", shape, str(row.params)))
    table = render_table(("Layer (type)", "Output Shape", "Param #"), rows)
    return (
        f"{title}\n\n{table}\n\n"
        f"Total params: {total}\n"
        f"Trainable params: {trainable}\n"
        f"Non-trainable params: {total - trainable}"
    )

"""
Command-line harness: synth, train, evaluate, compare, grad-check, summary, runs.

Exit codes: 0 success, 1 usage, 2 data/IO, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import __version__
from . import checkpoint, data, gradcheck, report, runs, trainer, zoo
from .config import coerce, get_log_level, load_env, merge_options, read_config_file
from .errors import DataError, MgcnError, NumericError, UsageError

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.mgcn"
HISTORY_FILE = "history.txt"
MANIFEST_FILE = "manifest.txt"
REPORT_FILE = "report.txt"

TRAIN_DEFAULTS: Dict[str, Any] = {
    "model": None,
    "head": None,
    "data": None,
    "synth": None,
    "img_size": 64,
    "channels": None,
    "epochs": 20,
    "batch_size": 32,
    "lr": 1e-3,
    "optimizer": "adam",
    "seed": 0,
    "split": 0.8,
    "threshold": 0.5,
    "out": None,
}

DATA_SOURCES = ("data", "synth")

TRAIN_TYPES: Dict[str, type] = {
    "model": str,
    "head": str,
    "data": str,
    "synth": int,
    "img_size": int,
    "channels": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "optimizer": str,
    "seed": int,
    "split": float,
    "threshold": float,
    "out": str,
}


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting, so every command maps errors the same way."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# ============================================================
# Run manifest
# ============================================================


@dataclass(frozen=True)
class RunManifest:
    model: str
    img_size: int
    channels: int
    dataset: str
    split: float
    epochs: int
    batch_size: int
    optimizer: str
    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float
    seed: int
    threshold: float
    params: int
    head: str = ""
    synth_per_class: int = 0
    checkpoint: str = CHECKPOINT_FILE
    history: str = HISTORY_FILE
    version: str = __version__

    def items(self) -> List[Tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    @classmethod
    def from_kv(cls, values: Dict[str, str], source: str = MANIFEST_FILE) -> "RunManifest":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in values:
                if f.default is dataclasses.MISSING:
                    raise DataError(f"{source}: missing {f.name}")
                continue
            kind = {"int": int, "float": float}.get(str(f.type), str)
            try:
                kwargs[f.name] = kind(values[f.name])
            except ValueError as e:
                raise DataError(f"{source}: bad value for {f.name}: {values[f.name]!r}") from e
        return cls(**kwargs)

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            seed=self.seed,
            threshold=self.threshold,
        )


def read_manifest(run_dir: Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.is_file():
        raise DataError(f"run directory {run_dir} has no {MANIFEST_FILE}")
    return RunManifest.from_kv(report.read_kv(path), str(path))


def _dataset(
    manifest_or_opts: Dict[str, Any],
    img_size: int,
    channels: int,
) -> data.Dataset:
    source = manifest_or_opts.get("data")
    per_class = manifest_or_opts.get("synth")
    if source:
        return data.load_directory(source, data.PreprocessConfig(img_size, channels))
    return data.synth_dataset(per_class, img_size, manifest_or_opts.get("seed", 0), channels)


def rebuild_split(manifest: RunManifest) -> Tuple[data.Dataset, data.Dataset]:
    """The exact train/validation split a run was trained on."""
    if manifest.dataset == "synth":
        opts = {"synth": manifest.synth_per_class, "seed": manifest.seed}
    else:
        opts = {"data": manifest.dataset}
    ds = _dataset(opts, manifest.img_size, manifest.channels)
    return data.split(ds, manifest.split, manifest.seed)


def _registry(action: Callable[..., Any], *args: Any) -> Any:
    try:
        return action(*args)
    except Exception as e:
        logger.warning(f"[Runs] Registry update {action.__name__} failed: {e}")
        return None


# ============================================================
# Commands
# ============================================================


def cmd_train(args: argparse.Namespace) -> int:
    flags = {key: getattr(args, key, None) for key in TRAIN_DEFAULTS}
    file_values = read_config_file(args.config, TRAIN_DEFAULTS) if args.config else {}
    if any(flags[key] is not None for key in DATA_SOURCES):
        # --data and --synth are one choice; a flag replaces the file's choice whole
        file_values = {k: v for k, v in file_values.items() if k not in DATA_SOURCES}
    opts = merge_options(flags, file_values, TRAIN_DEFAULTS)
    opts = {key: coerce(value, TRAIN_TYPES[key], key) for key, value in opts.items()}

    if not opts["model"]:
        raise UsageError(f"--model is required; valid models: {', '.join(zoo.MODEL_NAMES)}")
    if (opts["data"] is None) == (opts["synth"] is None):
        raise UsageError("exactly one of --data DIR or --synth N is required")
    if opts["channels"] not in (None, 1, 3):
        raise UsageError(f"--channels must be 1 or 3, got {opts['channels']}")

    bp = zoo.model_blueprint(opts["model"], opts["img_size"], opts["head"], opts["channels"])
    cfg = trainer.TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        optimizer=opts["optimizer"],
        learning_rate=opts["lr"],
        seed=opts["seed"],
        threshold=opts["threshold"],
    )
    channels = bp.input_shape[2]
    ds = _dataset(opts, opts["img_size"], channels)
    train_ds, val_ds = data.split(ds, opts["split"], opts["seed"])
    net = zoo.allocate(bp, opts["seed"])

    out = Path(opts["out"] or Path("runs") / f"{opts['model']}-seed{opts['seed']}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create run directory {out}: {e}") from e

    manifest = RunManifest(
        model=opts["model"],
        img_size=opts["img_size"],
        channels=channels,
        dataset=str(Path(opts["data"]).resolve()) if opts["data"] else "synth",
        split=opts["split"],
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        epsilon=cfg.epsilon,
        seed=cfg.seed,
        threshold=cfg.threshold,
        params=net.count_params(),
        head=opts["head"] or "",
        synth_per_class=opts["synth"] or 0,
    )

    run_id = f"{opts['model']}-{uuid.uuid4().hex[:8]}"
    _registry(
        runs.create_run, run_id, manifest.model, str(out.resolve()), manifest.dataset,
        manifest.img_size, manifest.epochs, manifest.seed, manifest.params,
    )
    started = time.perf_counter()
    try:
        history = trainer.train(net, train_ds, val_ds, cfg)
        checkpoint.save(net, out / CHECKPOINT_FILE)
        (out / HISTORY_FILE).write_text(report.dump_kv(report.history_items(history)), encoding="utf-8")
        (out / MANIFEST_FILE).write_text(report.dump_kv(manifest.items()), encoding="utf-8")
    except OSError as e:
        _registry(runs.set_error, run_id, str(e), time.perf_counter() - started)
        raise DataError(f"cannot write run directory {out}: {e}") from e
    except MgcnError as e:
        _registry(runs.set_error, run_id, str(e), time.perf_counter() - started)
        raise

    elapsed = time.perf_counter() - started
    final = history.final
    _registry(runs.mark_completed, run_id, final.validation.report.accuracy, elapsed)
    logger.info(f"[CLI] Run {run_id} finished in {elapsed:.1f}s, written to {out}")

    title = f"Performance Metrics of {report.model_label(manifest.model, manifest.head or None)} (epoch {final.epoch})"
    print(report.epoch_table(title, final))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    if not args.run and not args.checkpoint:
        raise UsageError("one of --run DIR or --checkpoint FILE is required")
    if args.data and args.synth is not None:
        raise UsageError("--data and --synth are mutually exclusive")

    manifest: Optional[RunManifest] = None
    if args.run:
        run_dir = Path(args.run)
        if not run_dir.is_dir():
            raise DataError(f"run directory {run_dir} does not exist")
        manifest = read_manifest(run_dir)
        ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / manifest.checkpoint
    else:
        ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise DataError(f"checkpoint not found: {ckpt_path}")

    net = checkpoint.load(ckpt_path)
    img_size, _, channels = net.input_shape
    threshold = args.threshold if args.threshold is not None else (manifest.threshold if manifest else 0.5)

    if args.data:
        ds = data.load_directory(args.data, data.PreprocessConfig(img_size, channels))
        scope = f"{args.data}"
    elif args.synth is not None:
        seed = args.seed if args.seed is not None else 0
        ds = data.synth_dataset(args.synth, img_size, seed, channels)
        scope = f"synthetic data ({args.synth} per class, seed {seed})"
    elif manifest is not None:
        _, ds = rebuild_split(manifest)
        scope = "validation split"
    else:
        raise UsageError("--checkpoint without --run needs --data DIR or --synth N")

    metrics_report, loss = trainer.evaluate(net, ds, threshold)
    result = trainer.PhaseResult(metrics_report, loss)
    head = manifest.head if manifest else net.config.get("head")
    label = report.model_label(net.name, head or None)
    print(report.evaluation_table(f"Performance Metrics of {label} on {scope}", result))

    out = Path(args.out) if args.out else ckpt_path.parent / REPORT_FILE
    items: List[Tuple[str, object]] = [("records", len(ds)), ("threshold", float(threshold))]
    items.extend(report.evaluation_items(net.name, result))
    try:
        out.write_text(report.dump_kv(items), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write report {out}: {e}") from e
    logger.info(f"[CLI] Evaluation report written to {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    if not args.runs:
        raise UsageError("compare needs at least one run directory")

    loaded = []
    for run in args.runs:
        run_dir = Path(run)
        manifest = read_manifest(run_dir)
        history = report.history_from_kv(report.read_kv(run_dir / manifest.history))
        if len(history) == 0:
            raise DataError(f"run {run_dir} has an empty history")
        loaded.append((run_dir, manifest, history.final))

    base_labels = [report.model_label(m.model, m.head or None) for _, m, _ in loaded]
    base_keys = [m.model + (f"-{m.head}" if m.head else "") for _, m, _ in loaded]
    labels = [
        f"{label} [{run_dir.name}]" if base_labels.count(label) > 1 else label
        for label, (run_dir, _, _) in zip(base_labels, loaded)
    ]
    keys = [
        f"{key}_{i}" if base_keys.count(key) > 1 else key
        for i, key in enumerate(base_keys, start=1)
    ]
    print(report.compare_table(
        [(label, record) for label, (_, _, record) in zip(labels, loaded)],
        args.modality,
        args.loss,
    ))

    text = report.dump_kv(report.compare_items(
        [(key, record, m.params) for key, (_, m, record) in zip(keys, loaded)],
        args.loss,
    ))
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write {args.out}: {e}") from e
    else:
        print()
        print(text, end="")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    results = gradcheck.run_checks(args.seed, args.trials)
    failed = gradcheck.failures(results)
    rows = [
        (name, f"{err:.3e}", "FAIL" if name in failed else "ok") for name, err in results.items()
    ]
    print(report.render_table(("Op", "Max Relative Error", "Status"), rows))
    logger.info(f"[GradCheck] {len(results)} ops x {args.trials} trials in {time.perf_counter() - started:.1f}s")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    ds = data.synth_dataset(args.per_class, args.img_size, args.seed)
    try:
        written = data.export_png(ds, args.out)
    except OSError as e:
        raise DataError(f"cannot write synthetic dataset to {args.out}: {e}") from e
    print(f"wrote {len(written)} images to {args.out}")
    return 0


def cmd_summary(args: argparse.Namespace) -> int:
    bp = zoo.model_blueprint(args.model, args.img_size, args.head, args.channels)
    total, trainable = bp.count_params()
    h, w, c = bp.input_shape
    title = f"{report.model_label(bp.name, args.head)} on {h}x{w}x{c} input"
    print(report.summary_table(title, bp.shape_trace(), total, trainable))
    return 0


def cmd_runs(args: argparse.Namespace) -> int:
    try:
        rows = runs.list_runs(args.limit)
    except Exception as e:
        raise DataError(f"cannot read run registry: {e}") from e
    if not rows:
        print("no runs recorded")
        return 0
    table_rows = [
        (
            r["run_id"],
            r["model"],
            r["status"],
            "" if r["val_accuracy"] is None else report.fmt(r["val_accuracy"]),
            str(r["param_count"]),
            "" if r["wall_seconds"] is None else f"{r['wall_seconds']:.1f}",
            str(r["created_at"]),
        )
        for r in rows
    ]
    print(report.render_table(
        ("Run", "Model", "Status", "Val Accuracy", "Params", "Seconds", "Created"), table_rows
    ))
    return 0


# ============================================================
# Parser
# ============================================================


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = ArgumentParser(
        prog="mgcn",
        description="mgcn: CNN training engine and benchmark for COVID-19 image classification",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"mgcn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train a model and write a run directory")
    p.add_argument("--model", help=f"One of: {', '.join(zoo.MODEL_NAMES)}")
    p.add_argument("--head", help=f"Freeze the base and attach a preset head: {', '.join(zoo.HEAD_PRESETS)}")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="Dataset root with COVID/ and NORMAL/ subdirectories")
    src.add_argument("--synth", type=int, metavar="N", help="Use N synthetic images per class")
    p.add_argument("--img-size", dest="img_size", type=int)
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=trainer.OPTIMIZERS)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", type=float, help="Training fraction per class (default 0.8)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="Run directory")
    p.add_argument("--config", help="key=value file of defaults for the flags above")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="Score a saved model")
    p.add_argument("--run", help="Run directory written by train")
    p.add_argument("--checkpoint", help="Checkpoint file (default: the run's model.mgcn)")
    p.add_argument("--data")
    p.add_argument("--synth", type=int, metavar="N")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help=f"Machine-readable report (default: {REPORT_FILE} next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="Tabulate finished runs side by side")
    p.add_argument("runs", nargs="*", help="Run directories")
    p.add_argument("--modality", choices=tuple(report.MODALITIES), default="ct")
    p.add_argument("--loss", choices=report.LOSS_KINDS, default="bce")
    p.add_argument("--out", help="Write the key=value form here instead of stdout")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=gradcheck.DEFAULT_TRIALS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic COVID/NORMAL PNG tree")
    p.add_argument("--per-class", dest="per_class", type=int, default=50)
    p.add_argument("--img-size", dest="img_size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("summary", parents=[common], help="Print a model's layer shapes and parameter counts")
    p.add_argument("--model", required=True)
    p.add_argument("--img-size", dest="img_size", type=int, default=64)
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--head")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("runs", parents=[common], help="List recorded training runs")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_runs)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv`, run one command and return its exit code."""
    load_env()
    try:
        args = build_parser().parse_args(argv)
    except MgcnError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    logging.basicConfig(
        level=get_log_level(args.verbose),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )

    try:
        return args.func(args)
    except MgcnError as e:
        logger.debug(f"[CLI] {args.command} failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"[CLI] Unexpected failure in {args.command}: {e}")
        return 1

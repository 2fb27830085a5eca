"""
Image ingestion, preprocessing, splitting, batching and synthetic data.

Dataset layout on disk: <root>/COVID/*.png (label 1) and <root>/NORMAL/*.png
(label 0). Preprocessing: bilinear resize to img_size, BT.601 grayscale,
one channel axis, divide by 255, optional replication to three channels.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import get_threads
from .errors import DataError
from .tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)

CLASS_NAMES = ("NORMAL", "COVID")
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PreprocessConfig:
    img_size: int
    channels: int = 1

    def __post_init__(self) -> None:
        if self.img_size < 1:
            raise DataError(f"img_size must be positive, got {self.img_size}")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")


@dataclass
class ImageRecord:
    pixels: Tensor
    label: int
    source_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    records: List[ImageRecord]
    class_names: Tuple[str, str] = CLASS_NAMES
    img_size: int = 0

    def __post_init__(self) -> None:
        shapes = {r.pixels.shape for r in self.records}
        if len(shapes) > 1:
            raise DataError(f"records have mixed pixel shapes: {sorted(shapes)}")
        if shapes:
            (shape,) = shapes
            if shape[:2] != (self.img_size, self.img_size):
                raise DataError(f"record shape {shape} does not match img_size {self.img_size}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def channels(self) -> int:
        return self.records[0].pixels.shape[2] if self.records else 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> Tuple[int, int]:
        positives = int(self.labels.sum()) if self.records else 0
        return (len(self.records) - positives, positives)


# ============================================================
# Preprocessing
# ============================================================


def preprocess(raw: Union[Image.Image, np.ndarray], cfg: PreprocessConfig) -> Tensor:
    """Decoded image -> (img_size, img_size, channels) tensor in [0, 1]."""
    image = raw if isinstance(raw, Image.Image) else Image.fromarray(np.asarray(raw))
    if image.width == 0 or image.height == 0:
        raise DataError("cannot preprocess an empty image")
    if image.mode not in ("L", "RGB"):
        image = image.convert("RGB")

    image = image.resize((cfg.img_size, cfg.img_size), Image.Resampling.BILINEAR)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr @ LUMA_WEIGHTS
    gray = np.clip(arr / 255.0, 0.0, 1.0).astype(get_dtype())
    gray = gray.reshape(cfg.img_size, cfg.img_size, 1)
    if cfg.channels == 3:
        gray = np.repeat(gray, 3, axis=2)
    return Tensor(gray)


def _decode(path: Path, cfg: PreprocessConfig) -> Tensor:
    try:
        with Image.open(path) as image:
            if image.format != "PNG":
                raise DataError(f"{path} is not a PNG file (format {image.format})")
            image.load()
            return preprocess(image, cfg)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DataError(f"cannot decode {path}: {e}") from e


def load_directory(root: Union[str, Path], cfg: PreprocessConfig, threads: Optional[int] = None) -> Dataset:
    """
    Load every .png under root/NORMAL and root/COVID.

    Records are ordered by (label, filename) whatever order the decode
    workers finish in. Non-PNG files are ignored.
    """
    root = Path(root)
    entries: List[Tuple[Path, int]] = []
    for label, class_name in enumerate(CLASS_NAMES):
        class_dir = root / class_name
        if not class_dir.is_dir():
            raise DataError(f"missing class directory: {class_dir}")
        files = sorted(
            (p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png"),
            key=lambda p: p.name,
        )
        entries.extend((p, label) for p in files)

    if not entries:
        raise DataError(f"no .png files found under {root}")

    workers = threads or get_threads()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pixels = list(pool.map(lambda entry: _decode(entry[0], cfg), entries))

    records = [
        ImageRecord(p, label, str(path)) for p, (path, label) in zip(pixels, entries)
    ]
    ds = Dataset(records, CLASS_NAMES, cfg.img_size)
    normal, covid = ds.class_counts()
    logger.info(f"[Data] Loaded {len(ds)} images from {root} (COVID={covid}, NORMAL={normal})")
    return ds


# ============================================================
# Splitting and batching
# ============================================================


def split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Stratified seeded split: per class, floor(fraction * n) shuffled records go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(seed)
    labels = ds.labels
    train: List[ImageRecord] = []
    held_out: List[ImageRecord] = []
    for label, class_name in enumerate(ds.class_names):
        idx = np.flatnonzero(labels == label)
        if idx.size == 0:
            raise DataError(f"class {class_name} has no records to split")
        idx = rng.permutation(idx)
        n_train = math.floor(train_fraction * idx.size)
        train.extend(ds.records[i] for i in idx[:n_train])
        held_out.extend(ds.records[i] for i in idx[n_train:])

    if not train or not held_out:
        raise DataError(
            f"split of {len(ds)} records at {train_fraction} leaves an empty partition"
        )
    return (
        Dataset(train, ds.class_names, ds.img_size),
        Dataset(held_out, ds.class_names, ds.img_size),
    )


def to_nchw(records: Sequence[ImageRecord]) -> Tensor:
    stacked = np.stack([r.pixels.data for r in records])
    return Tensor(stacked.transpose(0, 3, 1, 2))


def _iter_batches(
    ds: Dataset, order: np.ndarray, batch_size: int
) -> Iterator[Tuple[Tensor, Tensor]]:
    for start in range(0, len(order), batch_size):
        chunk = [ds.records[i] for i in order[start:start + batch_size]]
        yield to_nchw(chunk), Tensor([r.label for r in chunk])


def batches(
    ds: Dataset, batch_size: int, shuffle_seed: Optional[int] = None
) -> Iterator[Tuple[Tensor, Tensor]]:
    """(images NCHW, labels) pairs; the final partial batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    if shuffle_seed is None:
        order = np.arange(len(ds))
    else:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    return _iter_batches(ds, order, batch_size)


# ============================================================
# Synthetic data
# ============================================================


def synth_dataset(n_per_class: int, img_size: int, seed: int = 0, channels: int = 1) -> Dataset:
    """
    Two-class stand-in: label 1 is a bright centered disk (0.9) on a dark
    background (0.2), label 0 the inverse contrast. Gaussian noise (sigma 0.05)
    is added and the result clamped to [0, 1].
    """
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    cfg = PreprocessConfig(img_size, channels)
    rng = np.random.default_rng(seed)

    center = (img_size - 1) / 2.0
    yy, xx = np.mgrid[0:img_size, 0:img_size]
    disk = (yy - center) ** 2 + (xx - center) ** 2 <= (0.3 * img_size) ** 2
    bright = np.where(disk, 0.9, 0.2)
    templates = {0: 1.0 - bright, 1: bright}

    records = []
    for label in (0, 1):
        for _ in range(n_per_class):
            image = np.clip(templates[label] + rng.normal(0.0, 0.05, size=disk.shape), 0.0, 1.0)
            image = image.astype(get_dtype()).reshape(img_size, img_size, 1)
            if cfg.channels == 3:
                image = np.repeat(image, 3, axis=2)
            records.append(ImageRecord(Tensor(image), label))
    return Dataset(records, CLASS_NAMES, img_size)


def export_png(ds: Dataset, root: Union[str, Path]) -> List[Path]:
    """Write `ds` as 8-bit grayscale PNGs in the COVID/NORMAL layout."""
    root = Path(root)
    written = []
    for class_name in ds.class_names:
        (root / class_name).mkdir(parents=True, exist_ok=True)
    for i, record in enumerate(ds.records):
        gray = record.pixels.data[:, :, 0].astype(np.float64)
        quantized = np.round(gray * 255.0).clip(0, 255).astype(np.uint8)
        path = root / ds.class_names[record.label] / f"img_{i:05d}.png"
        Image.fromarray(quantized).save(path, format="PNG")
        written.append(path)
    logger.info(f"[Data] Exported {len(written)} images to {root}")
    return written

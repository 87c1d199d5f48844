"""Dataset ingestion (IDX and CIFAR-style binaries), synthetic data, batching.

Pixels are stored as float64 in [0, 1], computed exactly as byte/255.
No channel normalization or augmentation happens here: attacks operate
in raw pixel space, so the epsilon-ball is defined on what the loaders
return.

All randomness is PCG64 seeded through ``numpy.random.SeedSequence``,
which is stable across platforms; shuffle order is a pure function of
(seed, epoch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    CountMismatchError,
    DataFormatError,
    MagicNumberError,
    TruncatedFileError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values outside [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)


def _read_exact(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair (big-endian headers)."""
    img_blob = _read_exact(images_path)
    if len(img_blob) < 16:
        raise TruncatedFileError(f"{images_path}: header needs 16 bytes")
    magic, n, rows, cols = struct.unpack(">IIII", img_blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise MagicNumberError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(img_blob) != 16 + n * rows * cols:
        raise TruncatedFileError(
            f"{images_path}: expected {16 + n * rows * cols} bytes, got {len(img_blob)}"
        )
    lab_blob = _read_exact(labels_path)
    if len(lab_blob) < 8:
        raise TruncatedFileError(f"{labels_path}: header needs 8 bytes")
    lmagic, ln = struct.unpack(">II", lab_blob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise MagicNumberError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lab_blob) != 8 + ln:
        raise TruncatedFileError(f"{labels_path}: expected {8 + ln} bytes, got {len(lab_blob)}")
    if n != ln:
        raise CountMismatchError(f"{n} images vs {ln} labels")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 1)
    return Dataset(images, labels, k)


def load_cifar_binary(paths, num_classes: int = 10, split: str = "train") -> Dataset:
    """Load CIFAR-style binary batches: per record one label byte then
    3072 pixel bytes (row-major R, G, B planes). Files concatenate in order."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    chunks_img, chunks_lab = [], []
    for path in paths:
        blob = _read_exact(path)
        if len(blob) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: length {len(blob)} not divisible by {CIFAR_RECORD_BYTES}"
            )
        raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        chunks_lab.append(raw[:, 0].astype(np.int64))
        chunks_img.append(raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(chunks_img), np.concatenate(chunks_lab),
                   num_classes, split)


def synth_dataset(num_classes: int, samples_per_class: int, shape,
                  seed: int = 0, noise_std: float = 0.1,
                  split: str = "train") -> Dataset:
    """Class-conditional synthetic images: a fixed random template per
    class plus per-sample Gaussian pixel noise, clamped to [0, 1].

    Templates depend only on ``seed``; the noise stream additionally
    depends on the split, so train/test share templates but not samples.
    """
    if num_classes < 2:
        raise ConfigError(f"synth_dataset needs num_classes >= 2, got {num_classes}")
    shape = tuple(int(v) for v in shape)
    template_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    templates = template_rng.uniform(0.0, 1.0, size=(num_classes, *shape))
    split_code = {"train": 1, "test": 2}.get(split)
    if split_code is None:
        raise ConfigError(f"synth_dataset split must be train|test, got {split!r}")
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, split_code]))
    images = np.empty((num_classes * samples_per_class, *shape), dtype=np.float64)
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for k in range(num_classes):
        lo = k * samples_per_class
        noise = noise_rng.normal(0.0, noise_std, size=(samples_per_class, *shape)) \
            if noise_std > 0 else 0.0
        images[lo:lo + samples_per_class] = np.clip(templates[k] + noise, 0.0, 1.0)
        labels[lo:lo + samples_per_class] = k
    return Dataset(images, labels, num_classes, split)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled partition; the last short batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(
        np.random.SeedSequence([seed, epoch])
    ).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


class BatchIterator:
    """Stateful wrapper over ``batches`` that advances its epoch counter."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def next_epoch(self):
        epoch = self.epoch
        self.epoch += 1
        return batches(self.dataset, self.batch_size, self.seed, epoch)

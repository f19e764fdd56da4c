"""Datasets: CIFAR binary records and a synthetic two-class entropy task."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetHandle:
    """Images as float32 N x 3 x 32 x 32 in [0, 1] plus integer labels.

    ``masks`` (synthetic data only) marks textured pixels, N x 32 x 32.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = "synthetic"
    seed: int = 0
    masks: np.ndarray | None = None
    splits: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[1:] != IMAGE_SHAPE or len(self.images) != len(self.labels):
            raise DatasetFormatError(
                f"expected N x 3 x 32 x 32 images with N labels, got {self.images.shape} and {self.labels.shape}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "DatasetHandle":
        return DatasetHandle(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            self.source,
            self.seed,
            None if self.masks is None else self.masks[idx],
        )

    def split(self, val_fraction: float, seed: int) -> tuple["DatasetHandle", "DatasetHandle"]:
        """Shuffle with ``seed`` and hold out ``val_fraction`` of the samples."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(len(self) * val_fraction))
        train, val = self.subset(order[n_val:]), self.subset(order[:n_val])
        train.splits = val.splits = {"train": len(train), "val": len(val)}
        return train, val

    def standardized(self, mean, std, dtype=np.float32) -> np.ndarray:
        m = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
        s = np.asarray(std, dtype=np.float64).reshape(1, 3, 1, 1)
        return ((self.images - m) / s).astype(dtype)


def load_cifar_bin(path, label_bytes: int = 1, label_index: int = 0, num_classes: int | None = None) -> DatasetHandle:
    """Parse a CIFAR binary file: per record ``label_bytes`` labels then R, G, B planes.

    CIFAR-10 uses one label byte; CIFAR-100 uses two (coarse, fine).
    """
    if not 0 <= label_index < label_bytes:
        raise ValueError(f"label_index {label_index} outside the {label_bytes} label bytes")
    raw = np.fromfile(Path(path), dtype=np.uint8)
    record = label_bytes + PIXELS
    if raw.size % record:
        raise DatasetFormatError(
            f"{path}: size {raw.size} bytes is not a multiple of the record size {record} "
            f"({raw.size // record} whole records, {raw.size % record} stray bytes)"
        )
    recs = raw.reshape(-1, record)
    labels = recs[:, label_index].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    if num_classes is None:
        num_classes = 100 if label_bytes == 2 and label_index == 1 else (20 if label_bytes == 2 else 10)
    return DatasetHandle(images, labels, num_classes, source="cifar-binary")


def write_cifar_bin(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_cifar_bin`; ``labels`` is N x label_bytes."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(len(images_u8), -1)
    recs = np.concatenate([labels, np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)], axis=1)
    Path(path).write_bytes(recs.tobytes())


# --------------------------------------------------------------------------
# Synthetic entropy task
# --------------------------------------------------------------------------


# Class 1 differs from class 0 only by a smooth bump in local noise amplitude.
# A per-image contrast gain spanning 16x makes absolute amplitude uninformative,
# so the label depends on how a region compares with the rest of the same image.
NOISE_BASE = 0.008
CONTRAST_RATIO = 4.0
GAIN_RANGE = (1.0, 16.0)
BLOB_SIGMA = (9.0, 12.0)
TINT = 0.03


def gen_synthetic(n: int, seed: int = 0, size: int = 32) -> DatasetHandle:
    """Balanced two-class set of mid-grey noise images.

    Every image gets uniform pixel noise whose amplitude is scaled by a
    log-uniform per-image gain. In class 1 the amplitude rises smoothly to
    ``CONTRAST_RATIO`` times the background inside a Gaussian envelope; the
    pixels where the envelope exceeds one half are recorded in ``masks``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=bool)
    yy, xx = np.mgrid[:size, :size]
    lo, hi = np.log(GAIN_RANGE[0]), np.log(GAIN_RANGE[1])
    for i in range(n):
        amp = NOISE_BASE * np.exp(rng.uniform(lo, hi))
        grey = 0.5 + rng.uniform(-TINT, TINT)
        envelope = np.zeros((size, size))
        if labels[i] == 1:
            cy, cx = rng.uniform(6, size - 6, size=2)
            sigma = rng.uniform(*BLOB_SIGMA)
            envelope = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
            masks[i] = envelope > 0.5
        # unit-variance uniform noise
        noise = rng.uniform(-1.0, 1.0, size=(3, size, size)) * np.sqrt(3.0)
        images[i] = np.clip(grey + amp * (1 + (CONTRAST_RATIO - 1) * envelope) * noise, 0.0, 1.0)
    return DatasetHandle(images, labels, 2, source="synthetic", seed=seed, masks=masks)

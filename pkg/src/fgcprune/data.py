"""Datasets: seeded synthetic pattern images and IDX binary files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GEOMETRIES = ("bars", "blobs", "rings")
# Peak pattern intensity. Chosen so a nearest-centroid classifier is near
# perfect at noise 0.1 and at chance at noise 10.
PATTERN_AMPLITUDE = 0.3
# Offsets the seed stream so train and test draws never share noise.
_SPLIT_STREAM = {"train": 0, "test": 1}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def raw_images(self) -> np.ndarray:
        """Pixels before normalization."""
        if self.mean is None:
            return self.images
        return self.images * self.std[None, :, None, None] + self.mean[None, :, None, None]

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids)
        return replace(self, images=self.images[ids], labels=self.labels[ids], ids=self.ids[ids])


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = raw.mean(axis=(0, 2, 3))
    std = raw.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(raw: np.ndarray, labels: np.ndarray, split: str,
              stats: Optional[tuple] = None) -> Dataset:
    """Per-channel standardization; ``stats`` (mean, std) come from the train split."""
    mean, std = channel_stats(raw) if stats is None else stats
    images = (raw - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, np.asarray(labels, dtype=np.int64), split, mean, std)


def _pattern(geometry: str, cls: int, n_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    y, x = yy - centre, xx - centre
    if geometry == "bars":
        angle = np.pi * cls / n_classes
        dist = np.abs(x * np.sin(angle) - y * np.cos(angle))
        width = size / 10.0
        return np.exp(-0.5 * (dist / width) ** 2)
    if geometry == "blobs":
        angle = 2 * np.pi * cls / n_classes
        radius = size / 4.0
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        sigma = size / 8.0
        return np.exp(-0.5 * ((y - cy) ** 2 + (x - cx) ** 2) / sigma ** 2)
    # rings: radius grows with the class index
    r = np.hypot(y, x)
    radius = size * (0.1 + 0.35 * cls / max(n_classes - 1, 1))
    return np.exp(-0.5 * ((r - radius) / (size / 16.0)) ** 2)


def synth_clusters(n_classes: int, n_per_class: int, image_size: int = 16,
                   class_geometry: str = "bars", noise_sigma: float = 0.3, seed: int = 0,
                   split: str = "train", stats: Optional[tuple] = None) -> Dataset:
    """One fixed pattern per class plus i.i.d. Gaussian pixel noise.

    Instances are laid out class by class. The test split uses a separate
    noise stream; pass the train split's ``(mean, std)`` as ``stats``.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if class_geometry not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {class_geometry!r}; choose from {GEOMETRIES}")
    if image_size < 8:
        raise ConfigError(f"image_size {image_size} is too small for {class_geometry!r} (min 8)")
    if split not in _SPLIT_STREAM:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    patterns = PATTERN_AMPLITUDE * np.stack(
        [_pattern(class_geometry, c, n_classes, image_size) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    raw = patterns[labels][:, None, :, :].copy()
    raw += noise_sigma * rng.standard_normal(raw.shape)
    return normalize(raw, labels, split, stats)


# ---------------------------------------------------------------------------
# IDX files


def _read_exact(path: Path, magic: int, ndim: int) -> tuple[tuple, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated header: expected {header} bytes, got {len(blob)}")
    dims = struct.unpack(">" + "I" * ndim, blob[4:header])
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return dims, blob[header:]


def read_idx(images_path, labels_path, split: str = "train", stats: Optional[tuple] = None) -> Dataset:
    """Parse an unsigned-byte IDX image/label pair; pixels scaled to [0, 1] then normalized."""
    (n, h, w), payload = _read_exact(images_path, IDX_IMAGES_MAGIC, 3)
    (m,), lab = _read_exact(labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise DataFormatError(f"{n} images but {m} labels")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return normalize(raw, labels, split, stats)


def quantize(raw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(raw, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Pixels already in [0, 1] pass through; anything else is min-max rescaled.

    Readers standardize per channel, so the affine map costs only quantization.
    """
    lo, hi = float(raw.min()), float(raw.max())
    if lo >= 0.0 and hi <= 1.0:
        return raw
    return (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (as 8-bit, see :func:`to_unit_range`) and labels."""
    raw = dataset.raw_images()
    if raw.shape[1] != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    raw = to_unit_range(raw)
    n, _, h, w = raw.shape
    if dataset.labels.max() > 255 or dataset.labels.min() < 0:
        raise DataFormatError("labels must fit in an unsigned byte")
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                                  + quantize(raw[:, 0]).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchPlan:
    seed: int
    epoch: int
    batches: list

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def batches(n, batch_size: int, seed: int, epoch: int) -> BatchPlan:
    """Seeded shuffle of all instance ids, cut into batches.

    A short last batch is kept, except that a lone leftover id is folded into
    the previous batch (batch statistics need at least two instances).
    """
    n = len(n) if hasattr(n, "__len__") else int(n)
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch_size must lie in [1, {n}], got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    cut = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(cut) > 1 and len(cut[-1]) == 1:
        cut[-2:] = [np.concatenate(cut[-2:])]
    return BatchPlan(seed, epoch, cut)

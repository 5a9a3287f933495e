"""Desk-scale datasets: procedural gratings, IDX files, seeded batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .vit import patchify

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # or "idx"
    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    frequency: float = 0.25  # grating cycles per pixel
    amplitude: float = 0.25
    tint: float = 0.1  # class-dependent mean shift per channel
    noise_std: float = 0.1
    train_size: int = 2048
    eval_size: int = 512
    train_images: str = ""
    train_labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.num_classes < 1 or self.channels < 1 or self.image_size < 1:
            raise ValueError("num_classes, channels and image_size must be positive")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def patches(self, patch_size: int) -> np.ndarray:
        return patchify(self.images, patch_size)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)


@dataclass
class Batch:
    patches: np.ndarray  # (batch, n, patch_dim)
    labels: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------------------
# synthetic gratings
# ---------------------------------------------------------------------------


def class_orientation(label: int, num_classes: int) -> float:
    return np.pi * label / num_classes


def class_tint(label: int, spec: DatasetSpec) -> np.ndarray:
    ch = np.arange(spec.channels)
    return spec.tint * np.cos(2 * np.pi * (label / spec.num_classes + ch / max(spec.channels, 2)))


def gen_synthetic(spec: DatasetSpec, seed: int, index: int) -> tuple[np.ndarray, int]:
    """One ``(C, H, W)`` image and its label; a pure function of (spec, seed, index).

    Class ``k`` (``k = index mod num_classes``) is an oriented sinusoidal
    grating at angle ``pi * k / num_classes`` plus a small per-channel tint.
    Each image draws a random phase (the only within-class variation when
    ``noise_std == 0``) and i.i.d. Gaussian pixel noise.  Both orientation and
    tint are visible inside every patch.
    """
    label = index % spec.num_classes
    rng = np.random.default_rng([seed, index])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    theta = class_orientation(label, spec.num_classes)
    yy, xx = np.mgrid[0 : spec.image_size, 0 : spec.image_size].astype(np.float64)
    wave = np.sin(2.0 * np.pi * spec.frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = 0.5 + spec.amplitude * wave[None] + class_tint(label, spec)[:, None, None]
    img = img + spec.noise_std * rng.standard_normal((spec.channels, spec.image_size, spec.image_size))
    return img.astype(np.float32), label


def synthetic_dataset(spec: DatasetSpec, seed: int, start: int, count: int) -> Dataset:
    items = [gen_synthetic(spec, seed, i) for i in range(start, start + count)]
    images = np.stack([im for im, _ in items]) if items else np.zeros(
        (0, spec.channels, spec.image_size, spec.image_size), np.float32
    )
    labels = np.array([lb for _, lb in items], dtype=np.int64)
    return Dataset(images, labels, spec.num_classes)


def load_splits(spec: DatasetSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Train and eval splits; synthetic eval indices follow the train indices."""
    if spec.source == "synthetic":
        return (
            synthetic_dataset(spec, seed, 0, spec.train_size),
            synthetic_dataset(spec, seed, spec.train_size, spec.eval_size),
        )
    train = read_idx(spec.train_images, spec.train_labels, spec.num_classes)
    evals = read_idx(spec.eval_images, spec.eval_labels, spec.num_classes)
    return train, evals


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(raw: bytes, path) -> tuple[int, tuple[int, ...], int]:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = raw[3]
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    return magic, dims, end


def read_idx_array(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, offset = _read_header(raw, path)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    count = int(np.prod(dims))
    if len(raw) - offset != count:
        raise IdxFormatError(f"{path}: header promises {count} bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def read_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Unsigned-byte IDX image/label pair as a single-channel dataset in [0, 1]."""
    images = read_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx_array(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    if len(labels) and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} exceeds declared num_classes={num_classes}")
    data = (images.astype(np.float32) / 255.0)[:, None]
    return Dataset(data, labels, num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x08 type byte, big-endian dims)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def epoch_permutation(size: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(size)


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int, patch_size: int
) -> Iterator[Batch]:
    """Shuffled full batches; the trailing ``len % batch_size`` examples are dropped."""
    if batch_size < 1 or batch_size > len(dataset):
        raise ValueError(f"batch_size {batch_size} invalid for dataset of size {len(dataset)}")
    order = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(patchify(dataset.images[idx], patch_size), dataset.labels[idx], idx)

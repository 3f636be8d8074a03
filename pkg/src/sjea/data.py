"""Dataset loading: CIFAR-10 / STL-10 binary distributions and a procedural
synthetic set of colored shapes.

Images are held as float32 (N,3,H,W) arrays in [0,1]; normalization happens
downstream using the train split's channel statistics, which loaders copy
onto the other splits.  Loaders validate files fully before constructing any
dataset, so a malformed file never yields a partially-valid result.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .errors import ContractViolation, FormatError

__all__ = [
    "Dataset", "SplitDatasets", "compute_channel_stats",
    "load_cifar10", "load_stl10", "synth_dataset",
]

_CIFAR_RECORD = 1 + 3 * 32 * 32
_STL_IMAGE = 3 * 96 * 96


@dataclass
class Dataset:
    """One split: images in [0,1], optional labels, shared channel stats."""
    images: np.ndarray
    labels: np.ndarray | None
    split: str
    channel_stats: tuple[np.ndarray, np.ndarray]
    num_classes: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ContractViolation(f"images must be (N,3,H,W), got {self.images.shape}")
        if self.split not in ("train", "test", "unlabeled"):
            raise ContractViolation(f"unknown split {self.split!r}")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise ContractViolation("one label per image required")
            if self.num_classes is not None and (
                    self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ContractViolation("labels out of [0, num_classes) range")

    def __len__(self) -> int:
        return len(self.images)


class SplitDatasets(NamedTuple):
    train: Dataset
    test: Dataset
    unlabeled: Dataset | None = None


def compute_channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = images.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    return mean, np.maximum(std, 1e-6)


def _read_file(path: str) -> bytes:
    if not os.path.isfile(path):
        raise FormatError(f"missing dataset file: {path}")
    with open(path, "rb") as f:
        return f.read()


def _parse_cifar_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_file(path)
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte "
            f"record (offset of first partial record: {len(raw) - len(raw) % _CIFAR_RECORD})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory: str) -> SplitDatasets:
    """Read the public binary batches: 5 train files plus one test file."""
    train_parts = [_parse_cifar_batch(os.path.join(directory, f"data_batch_{i}"))
                   for i in range(1, 6)]
    test_images, test_labels = _parse_cifar_batch(os.path.join(directory, "test_batch"))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    stats = compute_channel_stats(images)
    train = Dataset(images, labels, "train", stats, num_classes=10)
    test = Dataset(test_images, test_labels, "test", stats, num_classes=10)
    return SplitDatasets(train, test)


def _parse_stl_images(path: str) -> np.ndarray:
    raw = _read_file(path)
    if len(raw) == 0 or len(raw) % _STL_IMAGE != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {_STL_IMAGE}-byte image "
            f"(offset of first partial image: {len(raw) - len(raw) % _STL_IMAGE})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3, 96, 96)
    # planes are stored column-major; swap the spatial axes to row-major
    return arr.transpose(0, 1, 3, 2).astype(np.float32) / 255.0


def _parse_stl_labels(path: str, expected: int) -> np.ndarray:
    raw = _read_file(path)
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} labels for {expected} images")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if labels.min() < 1 or labels.max() > 10:
        raise FormatError(f"{path}: labels must be 1..10")
    return labels - 1


def load_stl10(directory: str) -> SplitDatasets:
    """Read the public binary distribution; unlabeled split loaded if present."""
    train_images = _parse_stl_images(os.path.join(directory, "train_X.bin"))
    train_labels = _parse_stl_labels(os.path.join(directory, "train_y.bin"),
                                     len(train_images))
    test_images = _parse_stl_images(os.path.join(directory, "test_X.bin"))
    test_labels = _parse_stl_labels(os.path.join(directory, "test_y.bin"),
                                    len(test_images))
    stats = compute_channel_stats(train_images)
    train = Dataset(train_images, train_labels, "train", stats, num_classes=10)
    test = Dataset(test_images, test_labels, "test", stats, num_classes=10)
    unlabeled = None
    unl_path = os.path.join(directory, "unlabeled_X.bin")
    if os.path.isfile(unl_path):
        unlabeled = Dataset(_parse_stl_images(unl_path), None, "unlabeled", stats)
    return SplitDatasets(train, test, unlabeled)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "ring")
# base hues: red, blue, green, yellow
_COLOR_HUES = (0.0, 0.62, 0.33, 0.15)


def _shape_sdf(kind: str, dx: np.ndarray, dy: np.ndarray, radius: float,
               theta: float) -> np.ndarray:
    """Signed distance to the shape boundary; negative inside."""
    if kind == "disk":
        return np.hypot(dx, dy) - radius
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rx = cos_t * dx + sin_t * dy
    ry = -sin_t * dx + cos_t * dy
    if kind == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) - radius * 0.82
    if kind == "triangle":
        d = -np.inf * np.ones_like(dx)
        for i in range(3):
            ang = theta + 2.0 * math.pi * i / 3.0
            d = np.maximum(d, math.cos(ang) * dx + math.sin(ang) * dy)
        return d - radius * 0.62
    if kind == "ring":
        return np.abs(np.hypot(dx, dy) - radius * 0.78) - radius * 0.3
    raise ContractViolation(f"unknown shape kind {kind!r}")


def synth_dataset(num_classes: int, per_class: int, size: int = 32,
                  seed: int = 0) -> Dataset:
    """Render colored geometric shapes; class = shape kind x color family.

    Nuisance variation per sample: position, scale, rotation, hue jitter,
    brightness/saturation jitter, and a noisy gray background.
    """
    if num_classes < 2:
        raise ContractViolation("need at least 2 classes")
    n_shapes = max(2, math.ceil(math.sqrt(num_classes)))
    n_shapes = min(n_shapes, len(_SHAPES))
    if num_classes > n_shapes * len(_COLOR_HUES):
        raise ContractViolation(
            f"at most {len(_SHAPES) * len(_COLOR_HUES)} classes supported")
    if per_class < 1 or size < 8:
        raise ContractViolation("per_class must be >= 1 and size >= 8")

    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    rng.shuffle(labels)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        cls = int(labels[i])
        shape = _SHAPES[cls % n_shapes]
        hue = _COLOR_HUES[(cls // n_shapes) % len(_COLOR_HUES)]

        cx = size / 2 + rng.uniform(-0.18, 0.18) * size
        cy = size / 2 + rng.uniform(-0.18, 0.18) * size
        radius = rng.uniform(0.20, 0.32) * size
        theta = rng.uniform(0.0, 2.0 * math.pi)
        h = (hue + rng.uniform(-0.05, 0.05)) % 1.0
        s = rng.uniform(0.75, 1.0)
        v = rng.uniform(0.7, 1.0)
        color = hsv_to_rgb(np.array([h, s, v], dtype=np.float64)).astype(np.float32)

        sdf = _shape_sdf(shape, xs - cx, ys - cy, radius, theta)
        alpha = np.clip(0.5 - sdf / 1.5, 0.0, 1.0).astype(np.float32)
        bg = rng.uniform(0.08, 0.3) + rng.uniform(0.0, 0.1, size=(size, size))
        bg = bg.astype(np.float32)
        img = bg[None] * (1.0 - alpha) + color[:, None, None] * alpha
        images[i] = np.clip(img, 0.0, 1.0)

    stats = compute_channel_stats(images)
    return Dataset(images, labels, "train", stats, num_classes=num_classes)

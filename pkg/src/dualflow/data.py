"""Procedural datasets and their binary cache file."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_CLASSES = (
    "filled-square",
    "hollow-square",
    "disk",
    "ring",
    "plus-cross",
    "x-cross",
    "horizontal-stripes",
    "vertical-stripes",
)
IMAGE_SIZE = 16
NOISE_STD = 0.02

CACHE_MAGIC = b"DFDS"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")  # magic, version, seed, n, K, H, W


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    seed: int
    name: str = "shapes"

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes, self.seed, self.name)

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Disjoint (train, test) split holding out ``fraction`` of the samples."""
        if not 0.0 < fraction <= 0.5:
            raise ValueError("split fraction must lie in (0, 0.5]")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = max(1, int(round(fraction * len(self))))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def _draw_shape(rng: np.random.Generator, label: int, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(3.5, 6.5)
    cx = rng.uniform(r, size - 1 - r)
    cy = rng.uniform(r, size - 1 - r)
    dx, dy = xx - cx, yy - cy
    inbox = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    dist = np.hypot(dx, dy)
    if label == 0:
        mask = inbox
    elif label == 1:
        th = rng.uniform(1.0, 2.0)
        mask = inbox & ((np.abs(dx) > r - th) | (np.abs(dy) > r - th))
    elif label == 2:
        mask = dist <= r
    elif label == 3:
        th = rng.uniform(1.2, 2.0)
        mask = (dist <= r) & (dist > r - th)
    elif label == 4:
        arm = rng.uniform(0.8, 1.4)
        mask = inbox & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    elif label == 5:
        arm = rng.uniform(0.8, 1.3)
        mask = (dist <= r * 1.2) & ((np.abs(dx - dy) <= arm) | (np.abs(dx + dy) <= arm))
    elif label == 6:
        period = int(rng.integers(2, 4))
        mask = inbox & (np.floor((dy + r) / period) % 2 == 0)
    elif label == 7:
        period = int(rng.integers(2, 4))
        mask = inbox & (np.floor((dx + r) / period) % 2 == 0)
    else:
        raise ValueError(f"unknown shape class {label}")
    intensity = rng.uniform(0.6, 1.0)
    background = rng.uniform(0.0, 0.15)
    img = np.where(mask, intensity, background)
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shapes(seed: int, n: int, n_classes: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """``n`` grayscale 16x16 images in [0, 1] with balanced labels."""
    if n_classes != len(SHAPE_CLASSES):
        raise ValueError(f"the shapes dataset has exactly {len(SHAPE_CLASSES)} classes")
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n, n_classes)
    images = np.stack([_draw_shape(rng, int(c)) for c in labels]).astype(np.float32)
    return images, labels


def generate_gmm2d(seed: int, n: int, n_classes: int = 8, radius: float = 2.0, std: float = 0.3):
    """Isotropic gaussians evenly spaced on a circle; label = component index."""
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n, n_classes)
    angles = 2 * np.pi * labels / n_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points = centers + std * rng.standard_normal((n, 2))
    return points.astype(np.float32), labels


def shapes_dataset(seed: int, n: int) -> Dataset:
    x, y = generate_shapes(seed, n)
    return Dataset(x, y, len(SHAPE_CLASSES), seed, "shapes")


def gmm_dataset(seed: int, n: int, n_classes: int = 8) -> Dataset:
    x, y = generate_gmm2d(seed, n, n_classes)
    return Dataset(x, y, n_classes, seed, "gmm2d")


def save_dataset(path, data: Dataset) -> None:
    """Header, raw little-endian float32 samples, then uint8 labels."""
    x = data.x if data.x.ndim == 3 else data.x.reshape(len(data), 1, -1)
    n, h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, data.seed, n, data.n_classes, h, w))
        fh.write(x.astype("<f4").tobytes())
        fh.write(data.y.astype(np.uint8).tobytes())


def load_dataset(path, name: str = "shapes") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("dataset cache truncated")
    magic, version, seed, n, k, h, w = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValueError("not a dataset cache file")
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported dataset cache version {version}")
    body = n * h * w * 4
    if len(raw) != _HEADER.size + body + n:
        raise ValueError("dataset cache truncated or oversized")
    x = np.frombuffer(raw, dtype="<f4", count=n * h * w, offset=_HEADER.size).astype(np.float32)
    y = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size + body).astype(np.int64)
    x = x.reshape(n, w) if h == 1 else x.reshape(n, h, w)
    return Dataset(x, y, k, seed, name)

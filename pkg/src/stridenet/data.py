"""Datasets, the stratified split, augmentation and the synthetic texture classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import make_rng

__all__ = [
    "Dataset",
    "SYNTH_CLASSES",
    "source_size",
    "augment",
    "center_crop",
    "hflip",
    "split_dataset",
    "synth_dataset",
]

SYNTH_CLASSES = ("smooth", "blotchy", "speckled", "grainy")


@dataclass
class Dataset:
    images: np.ndarray  # (N, S, S, 3) in [0, 1]
    labels: np.ndarray  # (N,)
    class_names: tuple[str, ...] = field(default=SYNTH_CLASSES)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def source_size(image_size: int) -> int:
    """Stored resolution from which crops are taken (256 for a 224 model)."""
    return image_size * 8 // 7


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top : top + size, left : left + size]


def augment(image: np.ndarray, rng: np.random.Generator | None, size: int = 224,
            training: bool = True) -> np.ndarray:
    """Random crop + horizontal flip (p=0.5) for training, center crop otherwise."""
    image = np.asarray(image)
    if not training:
        return center_crop(image, size)
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = image[top : top + size, left : left + size]
    if rng.random() < 0.5:
        out = hflip(out)
    return out


def split_dataset(labels, ratio: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split; returns (train, test) index arrays.

    Each class ``c`` contributes ``floor(ratio * n_c)`` items to train and the
    rest to test.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot split an empty dataset")
    num_classes = int(labels.max()) + 1
    rng = make_rng(seed, stream=1)
    train, test = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no items")
        idx = rng.permutation(idx)
        k = int(np.floor(ratio * idx.size))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.concatenate(train), np.concatenate(test)


# -- synthetic textures -------------------------------------------------------


def _smooth(rng, s):
    yy, xx = np.mgrid[0:s, 0:s] / s
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    wave_f = rng.uniform(0.4, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * wave_f * (np.sin(theta) * xx - np.cos(theta) * yy) + phase)
    return rng.uniform(0.1, 0.3) * ramp + rng.uniform(0.02, 0.06) * wave


def _blotches(rng, s):
    noise = rng.standard_normal((s, s))
    field_ = gaussian_filter(noise, sigma=rng.uniform(2.0, 3.5), mode="wrap")
    return field_ / field_.std() * rng.uniform(0.12, 0.2)


def _speckle(rng, s):
    # Voronoi shards with strongly contrasting fills
    n_seeds = int(rng.integers(14, 28))
    seeds = rng.uniform(0, s, (n_seeds, 2))
    yy, xx = np.mgrid[0:s, 0:s]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    cell = d.argmin(axis=-1)
    fills = np.where(rng.random(n_seeds) < 0.5, -1.0, 1.0) * rng.uniform(0.2, 0.35, n_seeds)
    return fills[cell]


def _grain(rng, s):
    return rng.uniform(-1.0, 1.0, (s, s)) * rng.uniform(0.2, 0.35)


_GENERATORS = (_smooth, _blotches, _speckle, _grain)


def synth_dataset(n_per_class: int, image_size: int = 36, seed: int = 0) -> Dataset:
    """Four procedurally generated texture classes, ``n_per_class`` each.

    0 smooth low-frequency gradients, 1 mid-frequency blotches, 2 high-contrast
    angular shards, 3 fine-grain per-pixel noise. Base colour, orientation,
    phase and amplitude are drawn per image from ranges shared by all classes.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = make_rng(seed, stream=2)
    s = image_size
    images = np.empty((4 * n_per_class, s, s, 3), dtype=np.float32)
    labels = np.repeat(np.arange(4), n_per_class)
    for i, c in enumerate(labels):
        base = rng.uniform(0.4, 0.6) + rng.uniform(-0.05, 0.05, 3)
        tint = rng.uniform(0.85, 1.0, 3)
        pattern = _GENERATORS[c](rng, s)
        img = base + pattern[..., None] * tint + rng.normal(0, 0.01, (s, s, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, SYNTH_CLASSES)

"""Statistical texture branch: per-patch histogram variance and roughness maps.

Intensities are kept in ``[0, 1]`` before the histogram is built. Working on
raw 0..255 levels makes the variance of any natural patch run into the
thousands and pins ``R = 1 - 1/(1 + var)`` at 1; on the unit scale the
variance is bounded by 0.25, so ``R`` stays in ``[0, 0.2]`` and remains
discriminative.

Slipperiness is reported as ``1 - R``, a smoothness proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LUMA",
    "RAMP_STOPS",
    "RAMP_COLORS",
    "MAX_UNIT_ROUGHNESS",
    "RoughnessMap",
    "to_grayscale",
    "grid_shape",
    "patchify",
    "quantize",
    "histogram_variance",
    "roughness_factor",
    "roughness_map",
    "colorize",
    "blend",
    "overlay",
]

LUMA = (0.299, 0.587, 0.114)
RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
RAMP_COLORS = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)
# largest attainable R for unit-range intensities (variance <= 1/4)
MAX_UNIT_ROUGHNESS = 0.2


@dataclass(frozen=True)
class RoughnessMap:
    values: np.ndarray
    patch: tuple[int, int]  # (width, height)
    stride: int
    levels: int
    global_roughness: float

    @property
    def slipperiness(self) -> float:
        return 1.0 - self.global_roughness

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_dict(self) -> dict:
        rows, cols = self.values.shape
        return {
            "global_roughness": self.global_roughness,
            "slipperiness": self.slipperiness,
            "grid": {"rows": rows, "cols": cols},
            "patch": {"width": self.patch[0], "height": self.patch[1]},
            "stride": self.stride,
            "levels": self.levels,
        }


def to_grayscale(image) -> np.ndarray:
    """Luma-weighted gray image from an ``(h, w, 3)`` array in ``[0, 1]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("channel values must lie in [0, 1]")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def _patch_dims(patch) -> tuple[int, int]:
    if isinstance(patch, int):
        return patch, patch
    pw, ph = patch
    return int(pw), int(ph)


def grid_shape(height: int, width: int, patch, stride: int) -> tuple[int, int]:
    pw, ph = _patch_dims(patch)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pw < 1 or ph < 1:
        raise ValueError(f"patch dimensions must be positive, got {pw}x{ph}")
    if pw > width or ph > height:
        raise ValueError(f"patch {pw}x{ph} larger than image {width}x{height}")
    return (height - ph) // stride + 1, (width - pw) // stride + 1


def patchify(gray, patch, stride: int) -> list[np.ndarray]:
    """Row-major sliding windows; pixels past the last full window are dropped."""
    gray = np.asarray(gray, dtype=np.float64)
    pw, ph = _patch_dims(patch)
    rows, cols = grid_shape(*gray.shape, (pw, ph), stride)
    return [
        gray[r * stride : r * stride + ph, c * stride : c * stride + pw]
        for r in range(rows)
        for c in range(cols)
    ]


def quantize(intensities, levels: int) -> np.ndarray:
    """Nearest gray level index in ``0 .. levels-1`` (halves round up)."""
    z = np.asarray(intensities, dtype=np.float64)
    return np.floor(z * (levels - 1) + 0.5).astype(np.int64)


def histogram_variance(patch, levels: int = 256) -> float:
    """Variance of the quantized intensities, taken from their histogram."""
    if levels < 2:
        raise ValueError(f"need at least 2 gray levels, got {levels}")
    patch = np.asarray(patch, dtype=np.float64)
    if patch.size == 0:
        raise ValueError("empty patch")
    if patch.min() < 0.0 or patch.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    counts = np.bincount(quantize(patch, levels).ravel(), minlength=levels)
    prob = counts / patch.size
    z = np.arange(levels) / (levels - 1)
    # exactly rounded sums keep the result independent of summation order
    mean = math.fsum(z * prob)
    return math.fsum((z - mean) ** 2 * prob)


def roughness_factor(variance: float) -> float:
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    # v / (1 + v) equals 1 - 1 / (1 + v) without cancellation for small v
    return variance / (1.0 + variance)


def roughness_map(gray, patch=32, stride: int = 32, levels: int = 256) -> RoughnessMap:
    gray = np.asarray(gray, dtype=np.float64)
    pw, ph = _patch_dims(patch)
    rows, cols = grid_shape(*gray.shape, (pw, ph), stride)
    patches = patchify(gray, (pw, ph), stride)
    values = np.array(
        [roughness_factor(histogram_variance(p, levels)) for p in patches]
    ).reshape(rows, cols)
    global_r = math.fsum(values.ravel()) / values.size
    return RoughnessMap(values, (pw, ph), stride, levels, global_r)


def colorize(rmap: RoughnessMap, out_h: int, out_w: int, absolute: bool = False) -> np.ndarray:
    """Heat image ``(out_h, out_w, 3)`` from a roughness map.

    By default values are min-max scaled per map (a constant map becomes 0);
    ``absolute=True`` uses the fixed scale ``[0, MAX_UNIT_ROUGHNESS]`` so colours
    are comparable across images.
    """
    v = np.asarray(rmap.values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty roughness map")
    if absolute:
        t = np.clip(v / MAX_UNIT_ROUGHNESS, 0.0, 1.0)
    else:
        lo, hi = v.min(), v.max()
        t = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    rows, cols = v.shape
    ri = np.arange(out_h) * rows // out_h
    ci = np.arange(out_w) * cols // out_w
    t = t[ri[:, None], ci[None, :]]
    return ramp(t)


def ramp(t) -> np.ndarray:
    """Map values in ``[0, 1]`` through the fixed five-stop colour ramp."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack(
        [np.interp(t, RAMP_STOPS, RAMP_COLORS[:, ch]) for ch in range(3)], axis=-1
    )


def blend(image, heat, alpha: float = 0.5) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if image.shape != heat.shape:
        raise ValueError(f"image shape {image.shape} does not match heat shape {heat.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return np.clip((1.0 - alpha) * image + alpha * heat, 0.0, 1.0)


def overlay(image, patch=32, stride: int = 32, levels: int = 256, alpha: float = 0.5,
            absolute: bool = False) -> tuple[np.ndarray, RoughnessMap]:
    """Full branch on an RGB image: returns the blended overlay and the map."""
    image = np.asarray(image, dtype=np.float64)
    rmap = roughness_map(to_grayscale(image), patch, stride, levels)
    heat = colorize(rmap, image.shape[0], image.shape[1], absolute=absolute)
    return blend(image, heat, alpha), rmap

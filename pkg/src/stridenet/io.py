"""File boundaries: images, resizing, weight files, dataset folders and reports."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .data import Dataset, source_size
from .model import ModelConfig, SwinWeights, WeightMismatchError, parameter_shapes

__all__ = [
    "ImageError",
    "ImageNotFoundError",
    "ImageDecodeError",
    "ImageModeError",
    "WeightFileError",
    "WeightVersionError",
    "WeightManifestError",
    "WeightShapeError",
    "TruncatedWeightsError",
    "DatasetError",
    "DatasetManifest",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "decode_image",
    "encode_image",
    "resize",
    "save_weights",
    "load_weights",
    "scan_dataset",
    "load_dataset",
    "atomic_write_bytes",
    "atomic_write_text",
    "write_csv",
    "WEIGHTS_MAGIC",
    "WEIGHTS_VERSION",
]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
RGB_CONVERTIBLE = {"RGB", "RGBA", "RGBX", "L", "LA", "P", "PA", "1", "CMYK", "YCbCr", "LAB", "HSV"}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

WEIGHTS_MAGIC = b"STRDNETW"
WEIGHTS_VERSION = 1


class ImageError(Exception):
    """Base class for image loading failures."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class ImageDecodeError(ImageError):
    pass


class ImageModeError(ImageError):
    pass


class WeightFileError(ValueError):
    """Base class for weight file problems."""


class WeightVersionError(WeightFileError):
    pass


class WeightManifestError(WeightFileError, WeightMismatchError):
    pass


class WeightShapeError(WeightFileError, WeightMismatchError):
    pass


class TruncatedWeightsError(WeightFileError):
    pass


class DatasetError(ValueError):
    pass


# -- atomic output -----------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path, values: np.ndarray) -> None:
    """Row-major CSV, 9 significant digits."""
    lines = [",".join(f"{v:.9g}" for v in row) for row in np.atleast_2d(values)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- images --------------------------------------------------------------------


def decode_image(path) -> np.ndarray:
    """``(h, w, 3)`` float64 array in ``[0, 1]`` (8-bit channels / 255)."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode not in RGB_CONVERTIBLE:
                raise ImageModeError(f"{path}: cannot convert mode {mode!r} to RGB")
            rgb = img.convert("RGB")
    except ImageError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return np.asarray(rgb, dtype=np.uint8).astype(np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(image, path) -> None:
    """Write an ``(h, w, 3)`` image in ``[0, 1]`` as 8-bit RGB; format from suffix."""
    import io as _io

    path = Path(path)
    buf = _io.BytesIO()
    fmt = {".jpg": "JPEG", ".jpeg": "JPEG"}.get(path.suffix.lower(), "PNG")
    Image.fromarray(to_uint8(image)).save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())


def _resize_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(image, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres and clamped borders.

    ``size`` is an int (square) or ``(height, width)``.
    """
    image = np.asarray(image, dtype=np.float64)
    oh, ow = (size, size) if isinstance(size, int) else size
    h, w = image.shape[:2]
    y0, y1, fy = _resize_axis(h, oh)
    x0, x1, fx = _resize_axis(w, ow)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def normalize_image(image) -> np.ndarray:
    """Optional per-channel mean/std standardization (off by default)."""
    return (np.asarray(image) - IMAGENET_MEAN) / IMAGENET_STD


# -- weights -------------------------------------------------------------------


def save_weights(weights: SwinWeights, path) -> None:
    """Header (magic, length, JSON manifest) followed by little-endian float32 data."""
    weights.validate()
    manifest, chunks, offset = [], [], 0
    for name, arr in weights.arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "format_version": WEIGHTS_VERSION,
            "dtype": "<f4",
            "config": weights.config.to_dict(),
            "tensors": manifest,
            "payload_bytes": offset,
            "class_names": list(weights.class_names) if weights.class_names else None,
        },
        sort_keys=True,
    ).encode("utf-8")
    blob = WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    atomic_write_bytes(path, blob)


def load_weights(path) -> SwinWeights:
    raw = Path(path).read_bytes()
    if raw[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    start = len(WEIGHTS_MAGIC) + 4
    if len(raw) < start:
        raise TruncatedWeightsError(f"{path}: header truncated")
    (hlen,) = struct.unpack("<I", raw[len(WEIGHTS_MAGIC) : start])
    if len(raw) < start + hlen:
        raise TruncatedWeightsError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != WEIGHTS_VERSION:
        raise WeightVersionError(
            f"{path}: format version {header.get('format_version')!r}, expected {WEIGHTS_VERSION}"
        )
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightManifestError(f"{path}: invalid config ({exc})") from exc

    expected = parameter_shapes(config)
    entries = header.get("tensors", [])
    names = [e["name"] for e in entries]
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise WeightManifestError(
            f"{path}: manifest does not match config (missing={missing[:5]}, extra={extra[:5]})"
        )
    payload = memoryview(raw)[start + hlen :]
    arrays = OrderedDict()
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if shape != expected[name]:
            raise WeightShapeError(f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = 4 * int(np.prod(shape))
        lo = int(e["offset"])
        if lo < 0 or lo + nbytes > len(payload):
            raise TruncatedWeightsError(f"{path}: payload ends before tensor {name!r}")
        arrays[name] = np.frombuffer(payload[lo : lo + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
    labels = header.get("class_names")
    return SwinWeights(config, arrays, tuple(labels) if labels else None)


# -- dataset folders -----------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    class_names: tuple[str, ...]
    files: dict[str, list[Path]]

    def items(self) -> list[tuple[Path, int]]:
        return [(f, i) for i, c in enumerate(self.class_names) for f in self.files[c]]


def scan_dataset(root) -> DatasetManifest:
    """Class = sub-directory name, sorted lexicographically -> class index."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a readable directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if len(classes) < 2:
        raise DatasetError(f"dataset root {root} needs at least 2 class directories, found {classes}")
    files = {}
    for c in classes:
        found = sorted(
            p for p in (root / c).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not found:
            raise DatasetError(f"class directory {root / c} contains no images")
        files[c] = found
    return DatasetManifest(root, tuple(classes), files)


def load_dataset(root, image_size: int, normalize: bool = False) -> Dataset:
    """Decode every image and resize it to the crop source resolution."""
    manifest = scan_dataset(root)
    size = source_size(image_size)
    images, labels = [], []
    for path, label in manifest.items():
        try:
            img = resize(decode_image(path), size)
        except ImageError as exc:
            raise DatasetError(str(exc)) from exc
        images.append(normalize_image(img) if normalize else img)
        labels.append(label)
    return Dataset(np.stack(images).astype(np.float32), np.array(labels), manifest.class_names)

"""Shared image/feature data model and resampling.

Images live in natural pixel space: float32, channel-first, values in [0, 1].
Any backbone-specific normalization happens inside the backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

EMBEDDING_DIM = 128

PathLike = Union[str, Path]


def _frozen(a: np.ndarray, dtype=np.float32) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageTensor:
    """Decoded RGB image, shape (3, H, W), values in [0, 1].

    ``original_size`` is (width, height) of the file as decoded, before any
    resize. The array is read-only so instances can be shared freely.
    """

    data: np.ndarray
    source_path: str = ""
    original_size: Tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        if tuple(self.original_size) == (0, 0):
            object.__setattr__(self, "original_size", (data.shape[2], data.shape[1]))
        else:
            object.__setattr__(self, "original_size", tuple(int(v) for v in self.original_size))

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        """Current (width, height) of the stored array."""
        return self.width, self.height

    def replace(self, data: np.ndarray) -> "ImageTensor":
        """New image with the same provenance and different pixels."""
        return ImageTensor(np.clip(data, 0.0, 1.0), self.source_path, self.original_size)


@dataclass(frozen=True)
class FeatureMap:
    """Backbone output of shape (C, H, W)."""

    data: np.ndarray
    source: str = ""

    def __post_init__(self):
        data = _frozen(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {data.shape}")
        c, h, w = data.shape
        if c < 1 or h < 2 or w < 2:
            raise ValueError(f"feature map too small: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Embedding:
    data: np.ndarray
    kind: str = "global"

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != (EMBEDDING_DIM,):
            raise ValueError(f"embedding must have length {EMBEDDING_DIM}, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding contains non-finite values")
        if self.kind not in ("global", "patch"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        object.__setattr__(self, "data", data)


REAL, FAKE = 0, 1


def check_label(value) -> int:
    v = int(value)
    if v not in (REAL, FAKE) or v != value:
        raise ValueError(f"label must be 0 (real) or 1 (fake), got {value!r}")
    return v


def load_image(path: PathLike) -> ImageTensor:
    """Decode a PNG or JPEG file into an RGB :class:`ImageTensor`.

    Grayscale, palette and RGBA inputs are converted to RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ValueError(f"{path}: unsupported image format {im.format}")
            rgb = im.convert("RGB")
    except UnidentifiedImageError as exc:
        raise ValueError(f"{path}: cannot decode image") from exc
    arr = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return ImageTensor(arr, str(path), (rgb.width, rgb.height))


def to_uint8_hwc(img: ImageTensor) -> np.ndarray:
    return np.round(img.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_png(img: ImageTensor, path: PathLike) -> None:
    Image.fromarray(to_uint8_hwc(img), mode="RGB").save(path, format="PNG")


def resize_tensor(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (N, C, H, W) tensor to ``size`` = (w, h).

    Anti-aliased when shrinking; values clamped to [0, 1].
    """
    w, h = size
    if x.shape[-2:] == (h, w):
        return x
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp_(0.0, 1.0)


def resize_bilinear(img: ImageTensor, size: Tuple[int, int]) -> ImageTensor:
    w, h = (int(v) for v in size)
    if w <= 0 or h <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    if (w, h) == img.size:
        return img
    x = torch.from_numpy(np.array(img.data))[None]
    out = resize_tensor(x, (w, h))[0].numpy()
    return ImageTensor(out, img.source_path, img.original_size)

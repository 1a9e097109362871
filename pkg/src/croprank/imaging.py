"""Raster IO, crop extraction, resizing, and training-time augmentation.

Images are H x W x 3 float32 arrays of unit-interval intensities wrapped
in :class:`ImageBuffer`. Grayscale inputs are replicated to three
channels on load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import CropRect

NET_INPUT_SIDE = 227


class DecodeError(ValueError):
    """An image file could not be read or decoded."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"cannot decode {self.path}: {reason}")


@dataclass(frozen=True)
class ImageBuffer:
    """H x W x 3 raster of float32 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"image data must be HxWx3, got shape {d.shape}")
        if d.dtype != np.float32:
            object.__setattr__(self, "data", d.astype(np.float32))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 3

    @property
    def dims(self) -> tuple[int, int]:
        """(W, H), matching the rectangle convention."""
        return (self.width, self.height)


def load_image(path) -> ImageBuffer:
    """Decode a PNG/JPEG file to a unit-interval RGB buffer.

    Grayscale images are replicated across channels; alpha is dropped.
    Raises DecodeError (carrying the path) on unreadable input.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise DecodeError(path, "file not found") from e
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise DecodeError(path, str(e)) from e
    return ImageBuffer(arr)


def save_image(img: ImageBuffer, path) -> None:
    """Write a buffer as 8-bit PNG (or whatever the extension implies)."""
    arr = np.clip(img.data * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def extract_crop(img: ImageBuffer, rect: CropRect) -> ImageBuffer:
    """Copy the pixels under rect. The rect must lie inside the image;
    out-of-bounds rects are an error, never silently clamped.
    """
    if not rect.inside(img.dims):
        raise ValueError(f"crop {rect} out of bounds for image {img.dims}")
    out = img.data[rect.y:rect.y2, rect.x:rect.x2, :].copy()
    return ImageBuffer(out)


def _axis_weights(n_in: int, n_out: int):
    """Bilinear source indices/weights for one axis (half-pixel centers,
    edge clamped). Same-size mapping degenerates to the identity."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = (src - i0).astype(np.float32)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, frac


def resize_bilinear(img: ImageBuffer, out_dims: tuple[int, int]) -> ImageBuffer:
    """Resize to (w, h) with standard bilinear interpolation."""
    ow, oh = out_dims
    if ow < 1 or oh < 1:
        raise ValueError(f"resize target must be positive, got {out_dims}")
    if (ow, oh) == img.dims:
        return ImageBuffer(img.data.copy())
    x0, x1, fx = _axis_weights(img.width, ow)
    y0, y1, fy = _axis_weights(img.height, oh)
    r0, r1 = img.data[y0], img.data[y1]
    wx = fx[None, :, None]
    top = r0[:, x0] * (1 - wx) + r0[:, x1] * wx
    bot = r1[:, x0] * (1 - wx) + r1[:, x1] * wx
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return ImageBuffer(out.astype(np.float32))


def to_net_input(img: ImageBuffer) -> ImageBuffer:
    return resize_bilinear(img, (NET_INPUT_SIDE, NET_INPUT_SIDE))


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric/flip jitter applied to training inputs."""

    flip_prob: float = 0.5
    brightness_delta_max: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0.0 <= self.brightness_delta_max <= 0.3:
            raise ValueError("brightness_delta_max must lie in [0, 0.3]")
        lo, hi = self.contrast_range
        if not 0.0 < lo <= 1.0 <= hi:
            raise ValueError("contrast_range must satisfy 0 < lo <= 1 <= hi")


IDENTITY_AUGMENT = AugmentConfig(flip_prob=0.0, brightness_delta_max=0.0,
                                 contrast_range=(1.0, 1.0))


def augment(img: ImageBuffer, cfg: AugmentConfig,
            rng: np.random.Generator) -> ImageBuffer:
    """Optionally mirror horizontally, then jitter contrast about the
    per-channel mean and shift brightness, clamping back to [0, 1].

    Draw order is fixed (flip, contrast, brightness) so streams replay.
    """
    d = img.data
    if rng.uniform() < cfg.flip_prob:
        d = d[:, ::-1, :]
    lo, hi = cfg.contrast_range
    c = rng.uniform(lo, hi)
    b = rng.uniform(-cfg.brightness_delta_max, cfg.brightness_delta_max)
    if c != 1.0 or b != 0.0:
        mean = d.mean(axis=(0, 1), keepdims=True)
        d = np.clip((d - mean) * np.float32(c) + mean + np.float32(b), 0.0, 1.0)
    else:
        d = d.copy()
    return ImageBuffer(d.astype(np.float32, copy=False))

"""Rectangle arithmetic, crop sampling, and candidate-window generators.

All rectangles are axis-aligned, integer-pixel, (x, y, w, h) with the
origin at the top-left corner. Fractional coordinates are rounded half
away from zero so generated candidates are stable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MIN_IMAGE_SIDE = 32
MIN_CROP_SIDE = 16

BORDER_CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


class GeometryError(ValueError):
    """Raised when an image or configuration cannot produce valid crops."""


def round_half_away(v: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.floor(v + 0.5)) if v >= 0 else -int(math.floor(-v + 0.5))


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned pixel rectangle; the universal region currency."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"rect must have positive size, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, image_dims: tuple[int, int]) -> bool:
        W, H = image_dims
        return 0 <= self.x and self.x2 <= W and 0 <= self.y and self.y2 <= H

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class CropCandidate:
    """A generated crop plus the bookkeeping of where it came from."""

    rect: CropRect
    kind: str  # "border" | "square" | "window" | "pano"
    scale: float
    corner_or_slot: int = 0

    def __post_init__(self):
        if self.kind not in ("border", "square", "window", "pano"):
            raise GeometryError(f"unknown candidate kind {self.kind!r}")
        if self.kind == "border" and not 0 <= self.corner_or_slot <= 3:
            raise GeometryError("border candidates index one of four corners")
        if self.corner_or_slot < 0:
            raise GeometryError("corner_or_slot must be nonnegative")


@dataclass(frozen=True)
class SamplerConfig:
    """Controls crop mining: scales, square-crop count, jitter, seed."""

    scales: tuple[float, ...] = (0.5, 0.6)
    num_square: int = 3
    perturb_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales or not all(0.0 < s < 1.0 for s in self.scales):
            raise GeometryError(f"scales must lie in (0,1), got {self.scales}")
        if self.num_square < 1:
            raise GeometryError("num_square must be >= 1")
        if not 0.0 <= self.perturb_frac <= 0.2:
            raise GeometryError("perturb_frac must lie in [0, 0.2]")

    @property
    def crops_per_image(self) -> int:
        return len(self.scales) * (4 + self.num_square)


def _clamp_inside(x: int, y: int, w: int, h: int, W: int, H: int) -> CropRect:
    w = max(min(w, W), min(MIN_CROP_SIDE, W))
    h = max(min(h, H), min(MIN_CROP_SIDE, H))
    x = min(max(x, 0), W - w)
    y = min(max(y, 0), H - h)
    return CropRect(x, y, w, h)


def perturb(rect: CropRect, image_dims: tuple[int, int], frac: float,
            rng: np.random.Generator) -> CropRect:
    """Jitter a rect: shift x/y by up to frac of its size, rescale w/h by a
    shared factor in [1-frac, 1+frac], then clamp inside the image.

    Sides never drop below 16 px (or the image side, whichever is smaller).
    frac=0 is the identity.
    """
    W, H = image_dims
    if not rect.inside(image_dims):
        raise GeometryError(f"rect {rect} not inside image {image_dims}")
    dx = rng.uniform(-frac * rect.w, frac * rect.w)
    dy = rng.uniform(-frac * rect.h, frac * rect.h)
    f = rng.uniform(1.0 - frac, 1.0 + frac)
    w = round_half_away(rect.w * f)
    h = round_half_away(rect.h * f)
    x = round_half_away(rect.x + dx)
    y = round_half_away(rect.y + dy)
    return _clamp_inside(x, y, w, h, W, H)


def sample_crops(image_dims: tuple[int, int], cfg: SamplerConfig,
                 rng: np.random.Generator | None = None) -> list[CropCandidate]:
    """Generate the mining candidates for one image: per scale, four
    corner-anchored border crops plus evenly spaced square crops along the
    long axis, each jittered by ``perturb``.

    Emission order is fixed (scales in config order; corners TL,TR,BL,BR;
    squares by slot), so output is deterministic given cfg.seed.
    """
    W, H = image_dims
    if W < MIN_IMAGE_SIDE or H < MIN_IMAGE_SIDE:
        raise GeometryError(
            f"image {W}x{H} smaller than minimum {MIN_IMAGE_SIDE} px side")
    smallest = round_half_away(min(cfg.scales) * min(W, H))
    if smallest < MIN_CROP_SIDE:
        raise GeometryError(
            f"image {W}x{H} too small for scale {min(cfg.scales)}: "
            f"smallest window side {smallest} < {MIN_CROP_SIDE}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    out: list[CropCandidate] = []
    for s in cfg.scales:
        w = round_half_away(s * W)
        h = round_half_away(s * H)
        corners = ((0, 0), (W - w, 0), (0, H - h), (W - w, H - h))
        for idx, (x, y) in enumerate(corners):
            rect = perturb(CropRect(x, y, w, h), image_dims, cfg.perturb_frac, rng)
            out.append(CropCandidate(rect, "border", s, idx))

        side = round_half_away(s * min(W, H))
        long_dim = max(W, H)
        for k in range(cfg.num_square):
            c = long_dim * (k + 1) / (cfg.num_square + 1)
            if W >= H:
                cx, cy = c, H / 2
            else:
                cx, cy = W / 2, c
            x = round_half_away(cx - side / 2)
            y = round_half_away(cy - side / 2)
            rect = _clamp_inside(x, y, side, side, W, H)
            rect = perturb(rect, image_dims, cfg.perturb_frac, rng)
            out.append(CropCandidate(rect, "square", s, k))
    return out


def sliding_windows(image_dims: tuple[int, int], scales: Sequence[float],
                    grid: tuple[int, int]) -> list[CropRect]:
    """Aspect-preserving search windows: per scale, origins on a uniform
    gx-by-gy lattice spanning (0,0) through (W-w, H-h) inclusive.

    Order: scales as given, then rows, then columns.
    """
    W, H = image_dims
    gx, gy = grid
    if gx < 1 or gy < 1:
        raise GeometryError("grid must be at least 1x1")
    if not scales:
        raise GeometryError("scales must be nonempty")
    out: list[CropRect] = []
    for s in scales:
        if not 0.0 < s <= 1.0:
            raise GeometryError(f"window scale {s} outside (0, 1]")
        w = round_half_away(s * W)
        h = round_half_away(s * H)
        xs = [round_half_away(i * (W - w) / (gx - 1)) if gx > 1 else 0
              for i in range(gx)]
        ys = [round_half_away(j * (H - h) / (gy - 1)) if gy > 1 else 0
              for j in range(gy)]
        for y in ys:
            for x in xs:
                out.append(CropRect(x, y, w, h))
    return out


PROTOCOL_SCALES = (0.5, 0.6, 0.7, 0.8, 0.9)
PROTOCOL_GRID = (5, 5)


def protocol_windows(image_dims: tuple[int, int]) -> list[CropRect]:
    """The standard 125-window search set (5 scales x 5x5 grid)."""
    return sliding_windows(image_dims, PROTOCOL_SCALES, PROTOCOL_GRID)


def pano_candidates(image_dims: tuple[int, int],
                    sizes: Iterable[tuple[int, int]],
                    stride_frac: float) -> list[CropRect]:
    """Uniform origin lattice per window size, step = stride_frac of the
    window dimension on each axis. Duplicate rects are dropped.
    """
    W, H = image_dims
    sizes = list(sizes)
    if not sizes:
        raise GeometryError("pano candidate size list is empty")
    seen: dict[tuple[int, int, int, int], None] = {}
    for (w, h) in sizes:
        if w <= 0 or h <= 0 or w > W or h > H:
            raise GeometryError(f"pano window {w}x{h} does not fit {W}x{H}")
        step_x = max(1, round_half_away(stride_frac * w))
        step_y = max(1, round_half_away(stride_frac * h))
        for y in range(0, H - h + 1, step_y):
            for x in range(0, W - w + 1, step_x):
                seen.setdefault((x, y, w, h), None)
    return [CropRect(*key) for key in seen]


# Default panorama lattice: three window heights x two aspect ratios on a
# 1/8-stride grid. Tuned so a 6000x1200 panorama yields 2112 candidates.
PANO_HEIGHT_FRACS = (0.4, 0.6, 0.8)
PANO_ASPECTS = (4.0 / 3.0, 16.0 / 9.0)
PANO_STRIDE_FRAC = 0.125


def default_pano_sizes(image_dims: tuple[int, int]) -> list[tuple[int, int]]:
    W, H = image_dims
    sizes = []
    for hf in PANO_HEIGHT_FRACS:
        h = round_half_away(hf * H)
        for a in PANO_ASPECTS:
            w = round_half_away(a * h)
            if 0 < w <= W and 0 < h <= H:
                sizes.append((w, h))
    if not sizes:
        raise GeometryError(f"no default pano window fits image {W}x{H}")
    return sizes

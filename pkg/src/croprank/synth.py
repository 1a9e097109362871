"""Synthetic corpus generator for end-to-end pipeline checks.

Each scene is a textured background with one bright disc placed near a
rule-of-thirds power point. Well-composed by construction, the full
frames serve as positive sources for pair mining, and the known disc
position yields an oracle "best window" for benchmarking: the sliding
window whose own thirds points come closest to the disc center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (CropRect, PROTOCOL_GRID, PROTOCOL_SCALES,
                       round_half_away, sliding_windows)
from .imaging import ImageBuffer, resize_bilinear, save_image

_THIRDS = (1.0 / 3.0, 2.0 / 3.0)


@dataclass(frozen=True)
class DiscSpec:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class Scene:
    """A generated frame plus the disc-free background it was built on."""

    image: ImageBuffer
    background: ImageBuffer
    disc: DiscSpec
    index: int


def _coarse_noise(rng: np.random.Generator, dims: tuple[int, int],
                  cell: int, amp: float) -> np.ndarray:
    W, H = dims
    small = rng.uniform(-amp, amp,
                        size=(H // cell + 2, W // cell + 2, 3)).astype(np.float32)
    return resize_bilinear(ImageBuffer(small), (W, H)).data


def make_scene(index: int, seed: int) -> Scene:
    """Deterministic scene for (index, seed); the rng draw order is fixed."""
    rng = np.random.default_rng([seed, index])
    W = int(rng.integers(340, 421))
    aspect = rng.uniform(1.28, 1.45)
    H = round_half_away(W / aspect)

    base = rng.uniform(0.18, 0.38)
    tint = rng.uniform(-0.05, 0.05, size=3)
    slope_x, slope_y = rng.uniform(-0.06, 0.06, size=2)
    xs = np.linspace(0.0, 1.0, W, dtype=np.float32)
    ys = np.linspace(0.0, 1.0, H, dtype=np.float32)
    bg = (base + tint[None, None, :]
          + slope_x * (xs - 0.5)[None, :, None]
          + slope_y * (ys - 0.5)[:, None, None])
    bg = bg + _coarse_noise(rng, (W, H), cell=16, amp=0.05)
    bg = bg + rng.uniform(-0.015, 0.015, size=(H, W, 3))
    bg = np.clip(bg, 0.0, 1.0).astype(np.float32)

    color = rng.uniform(0.82, 0.97, size=3).astype(np.float32)
    fx = _THIRDS[int(rng.integers(0, 2))]
    fy = _THIRDS[int(rng.integers(0, 2))]
    jx, jy = rng.uniform(-0.04, 0.04, size=2)
    cx = (fx + jx) * W
    cy = (fy + jy) * H
    r = rng.uniform(0.055, 0.11) * min(W, H)

    yy, xx = np.mgrid[0:H, 0:W]
    dist = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    alpha = np.clip(r + 0.5 - dist, 0.0, 1.0).astype(np.float32)[:, :, None]
    img = bg * (1.0 - alpha) + color[None, None, :] * alpha
    return Scene(ImageBuffer(img.astype(np.float32)), ImageBuffer(bg),
                 DiscSpec(float(cx), float(cy), float(r)), index)


def disc_bbox(scene: Scene, margin: int = 4) -> CropRect:
    """Axis-aligned box around the disc, padded and clamped to the frame."""
    W, H = scene.image.dims
    d = scene.disc
    x = max(int(np.floor(d.cx - d.r)) - margin, 0)
    y = max(int(np.floor(d.cy - d.r)) - margin, 0)
    x2 = min(int(np.ceil(d.cx + d.r)) + margin, W)
    y2 = min(int(np.ceil(d.cy + d.r)) + margin, H)
    return CropRect(x, y, x2 - x, y2 - y)


def erase_disc(scene: Scene, margin: int = 4) -> ImageBuffer:
    """The frame with the disc region replaced by background texture."""
    box = disc_bbox(scene, margin)
    data = scene.image.data.copy()
    data[box.y:box.y2, box.x:box.x2] = \
        scene.background.data[box.y:box.y2, box.x:box.x2]
    return ImageBuffer(data)


def oracle_crop(image_dims: tuple[int, int], disc_cx: float,
                disc_cy: float) -> CropRect:
    """The protocol window whose nearest thirds power point is closest to
    the disc center (earliest window on ties)."""
    best_rect, best_d = None, np.inf
    for rect in sliding_windows(image_dims, PROTOCOL_SCALES, PROTOCOL_GRID):
        d = min(np.hypot(rect.x + fx * rect.w - disc_cx,
                         rect.y + fy * rect.h - disc_cy)
                for fx in _THIRDS for fy in _THIRDS)
        if d < best_d:
            best_rect, best_d = rect, d
    return best_rect


def generate_corpus(out_dir, n: int, seed: int,
                    train_frac: float = 2.0 / 3.0) -> dict:
    """Write a corpus: train/ frames for mining, bench/ frames with
    oracle annotations (annotations.json), and meta.jsonl describing
    every scene. Output is a pure function of (n, seed, train_frac).
    """
    if n < 3:
        raise ValueError("corpus needs at least 3 scenes")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0,1)")
    out = Path(out_dir)
    n_train = round_half_away(train_frac * n)
    n_train = min(max(n_train, 2), n - 1)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "bench").mkdir(parents=True, exist_ok=True)

    annotations = []
    meta_lines = []
    for index in range(n):
        scene = make_scene(index, seed)
        split = "train" if index < n_train else "bench"
        rel = f"{split}/synth_{index:05d}.png"
        save_image(scene.image, out / rel)
        if split == "bench":
            gt = oracle_crop(scene.image.dims, scene.disc.cx, scene.disc.cy)
            annotations.append({"image": rel, "crop": list(gt.as_tuple())})
        meta_lines.append(json.dumps(
            {"index": index, "image": rel, "split": split,
             "width": scene.image.width, "height": scene.image.height,
             "disc": [scene.disc.cx, scene.disc.cy, scene.disc.r]},
            separators=(",", ":")))
    (out / "annotations.json").write_text(
        json.dumps(annotations, separators=(",", ":")) + "\n", encoding="utf-8")
    (out / "meta.jsonl").write_text("\n".join(meta_lines) + "\n",
                                    encoding="utf-8")
    return {"out": str(out), "n": n, "train": n_train, "bench": n - n_train,
            "seed": seed}

"""Crop-quality metrics and the benchmark harness.

Metrics follow the usual re-targeting conventions: intersection over
union, mean normalized boundary displacement, and alpha-recall (the
percentage of images whose chosen crop overlaps ground truth with IoU
strictly above alpha). The harness scores the sliding-window lattice
plus the ground-truth rect on annotated images and aggregates per set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (CropRect, GeometryError, PROTOCOL_GRID,
                       PROTOCOL_SCALES, sliding_windows)
from .imaging import DecodeError, load_image
from .search import _resolve_scorer

DEFAULT_ALPHA = 0.75


class EvaluationError(ValueError):
    """Annotation file or benchmark input violates its contract."""


def iou(a: CropRect, b: CropRect) -> float:
    """Intersection over union of two rects; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def boundary_displacement(a: CropRect, b: CropRect,
                          image_dims: tuple[int, int]) -> float:
    """Mean absolute offset of the four edges, x-edges normalized by image
    width and y-edges by height."""
    W, H = image_dims
    if W <= 0 or H <= 0:
        raise EvaluationError(f"bad image dims {image_dims}")
    return (abs(a.x - b.x) / W + abs(a.x2 - b.x2) / W
            + abs(a.y - b.y) / H + abs(a.y2 - b.y2) / H) / 4.0


def alpha_recall(ious: Sequence[float], alpha: float = DEFAULT_ALPHA) -> float:
    """Percentage of IoU values strictly above alpha."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise EvaluationError("alpha_recall needs at least one value")
    return 100.0 * float((ious > alpha).sum()) / ious.size


@dataclass(frozen=True)
class AnnotatedImage:
    image_path: str
    ground_truth: CropRect
    category: str | None = None


def load_annotations(path) -> list[AnnotatedImage]:
    """Read a JSON array of {"image", "crop": [x,y,w,h], "category"?}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise EvaluationError(f"cannot read annotations {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise EvaluationError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, list) or not raw:
        raise EvaluationError(f"{path}: expected a nonempty JSON array")
    out = []
    for i, obj in enumerate(raw):
        try:
            crop = obj["crop"]
            if len(crop) != 4 or any(int(v) != v for v in crop):
                raise EvaluationError("crop must be four ints")
            rect = CropRect(*(int(v) for v in crop))
            out.append(AnnotatedImage(obj["image"], rect, obj.get("category")))
        except (KeyError, TypeError, GeometryError, EvaluationError) as e:
            raise EvaluationError(f"{path}[{i}]: bad annotation: {e}") from e
    return out


@dataclass(frozen=True)
class BenchRow:
    set_name: str
    image_path: str
    chosen: CropRect
    ground_truth: CropRect
    iou: float
    disp: float
    category: str | None = None


@dataclass(frozen=True)
class SetSummary:
    name: str
    n_images: int
    mean_iou: float
    mean_disp: float
    alpha_recall: float


@dataclass
class BenchReport:
    summaries: list[SetSummary]
    rows: list[BenchRow]
    alpha: float
    missing: dict[str, list[str]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Stable serialization: key-sorted, newline-terminated."""
        doc = {
            "alpha": self.alpha,
            "config": self.config,
            "missing": self.missing,
            "summaries": [{
                "name": s.name, "n_images": s.n_images,
                "mean_iou": s.mean_iou, "mean_disp": s.mean_disp,
                "alpha_recall": s.alpha_recall,
            } for s in self.summaries],
            "rows": [{
                "set": r.set_name, "image": r.image_path,
                "chosen": list(r.chosen.as_tuple()),
                "ground_truth": list(r.ground_truth.as_tuple()),
                "iou": r.iou, "disp": r.disp, "category": r.category,
            } for r in self.rows],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    def to_text(self) -> str:
        header = f"{'Set':<20} {'N':>5} {'IoU':>7} {'Disp.':>7} {'alpha-recall':>12}"
        lines = [header, "-" * len(header)]
        for s in self.summaries:
            lines.append(f"{s.name:<20} {s.n_images:>5} {s.mean_iou:>7.3f} "
                         f"{s.mean_disp:>7.3f} {s.alpha_recall:>12.1f}")
        lines.append(f"(alpha = {self.alpha})")
        for name, paths in self.missing.items():
            if paths:
                lines.append(f"missing in {name}: {len(paths)} image(s)")
        return "\n".join(lines) + "\n"


def run_benchmark(sets: dict[str, list[AnnotatedImage]], model,
                  image_root=None,
                  scales: Sequence[float] = PROTOCOL_SCALES,
                  grid: tuple[int, int] = PROTOCOL_GRID,
                  alpha: float = DEFAULT_ALPHA,
                  include_ground_truth: bool = True) -> BenchReport:
    """Score every annotated image: candidates are the sliding-window
    lattice plus (by default) the ground-truth rect; the argmax window is
    compared against ground truth. Images that fail to load are excluded
    and reported per set.
    """
    if not sets or any(not v for v in sets.values()):
        raise EvaluationError("benchmark needs at least one nonempty set")
    scorer = _resolve_scorer(model)
    root = Path(image_root) if image_root is not None else None
    rows: list[BenchRow] = []
    summaries: list[SetSummary] = []
    missing: dict[str, list[str]] = {}
    for name, annotations in sets.items():
        ious, disps = [], []
        missing[name] = []
        for ann in annotations:
            path = root / ann.image_path if root else Path(ann.image_path)
            try:
                img = load_image(path)
            except DecodeError:
                missing[name].append(ann.image_path)
                continue
            if not ann.ground_truth.inside(img.dims):
                raise EvaluationError(
                    f"{name}: ground truth {ann.ground_truth} exceeds "
                    f"{ann.image_path} ({img.width}x{img.height})")
            rects = sliding_windows(img.dims, scales, grid)
            if include_ground_truth:
                rects.append(ann.ground_truth)
            scores = scorer(img, rects)
            chosen = rects[int(np.argmax(scores))]
            row_iou = iou(chosen, ann.ground_truth)
            row_disp = boundary_displacement(chosen, ann.ground_truth, img.dims)
            rows.append(BenchRow(name, ann.image_path, chosen,
                                 ann.ground_truth, row_iou, row_disp,
                                 ann.category))
            ious.append(row_iou)
            disps.append(row_disp)
        if not ious:
            raise EvaluationError(f"{name}: no annotated image could be loaded")
        summaries.append(SetSummary(name, len(ious), float(np.mean(ious)),
                                    float(np.mean(disps)),
                                    alpha_recall(ious, alpha)))
    config = {"scales": list(scales), "grid": list(grid), "alpha": alpha,
              "include_ground_truth": include_ground_truth}
    return BenchReport(summaries, rows, alpha, missing, config)


def pair_order_accuracy(manifest, split: str, model, image_root=None) -> float:
    """Fraction of pairs in a split whose source outscores its crop."""
    from .dataset import cached_pair_features
    from .ranker import Checkpoint, score_features

    params = model.to_params() if isinstance(model, Checkpoint) else model
    full, crop = cached_pair_features(manifest, split, params, image_root)
    s_full = score_features(full, params)
    s_crop = score_features(crop, params)
    return float((s_full > s_crop).mean())

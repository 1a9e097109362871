"""Model-driven search: best-crop selection, heatmaps, panorama scan.

All entry points accept either a Checkpoint (weights are wrapped into a
scoring pipeline) or any callable (image, rects) -> scores, which keeps
the search logic testable with synthetic scorers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (CropRect, GeometryError, PANO_STRIDE_FRAC,
                       PROTOCOL_GRID, PROTOCOL_SCALES, default_pano_sizes,
                       pano_candidates, sliding_windows)
from .imaging import ImageBuffer, extract_crop, to_net_input
from .ranker import (Checkpoint, RankerParams, features_from_images,
                     score_features)

Scorer = Callable[[ImageBuffer, Sequence[CropRect]], np.ndarray]


@dataclass(frozen=True)
class ScoredCrop:
    rect: CropRect
    score: float


@dataclass(frozen=True)
class PanoResult:
    best: ScoredCrop
    candidate_count: int


def checkpoint_scorer(model: Checkpoint | RankerParams) -> Scorer:
    """Wrap checkpoint weights into a batch crop scorer."""
    params = model.to_params() if isinstance(model, Checkpoint) else model

    def scorer(img: ImageBuffer, rects: Sequence[CropRect]) -> np.ndarray:
        if not rects:
            return np.zeros(0, dtype=params.dtype)
        inputs = [to_net_input(extract_crop(img, r)) for r in rects]
        feats = features_from_images(inputs, params)
        return score_features(feats, params)

    return scorer


def _resolve_scorer(model) -> Scorer:
    if callable(model) and not isinstance(model, (Checkpoint, RankerParams)):
        return model
    return checkpoint_scorer(model)


def score_crop(img: ImageBuffer, rect: CropRect, model) -> float:
    if not rect.inside(img.dims):
        raise GeometryError(f"rect {rect} not inside image {img.dims}")
    return float(_resolve_scorer(model)(img, [rect])[0])


def best_crop(img: ImageBuffer, model,
              scales: Sequence[float] = PROTOCOL_SCALES,
              grid: tuple[int, int] = PROTOCOL_GRID,
              extra_candidates: Sequence[CropRect] = ()) -> ScoredCrop:
    """Highest-scoring window over the sliding-window lattice plus any
    extra candidates; ties resolve to the earliest candidate."""
    rects = sliding_windows(img.dims, scales, grid) + list(extra_candidates)
    scores = _resolve_scorer(model)(img, rects)
    i = int(np.argmax(scores))
    return ScoredCrop(rects[i], float(scores[i]))


@dataclass
class ScalarField:
    """Per-pixel accumulated window scores with coverage counts, plus the
    smoothed mean field derived from them."""

    score_sum: np.ndarray  # (H, W) float64
    coverage: np.ndarray   # (H, W) int64
    heat: np.ndarray       # (H, W) float64, blurred mean

    @property
    def dims(self) -> tuple[int, int]:
        return self.score_sum.shape[1], self.score_sum.shape[0]

    def mean(self) -> np.ndarray:
        if (self.coverage == 0).any():
            raise GeometryError("scalar field has uncovered pixels")
        return self.score_sum / self.coverage

    def normalized(self, lo: float | None = None,
                   hi: float | None = None) -> np.ndarray:
        """Map heat into [0,1]; pass shared lo/hi to compare two fields on
        one scale. A constant field maps to zeros."""
        lo = float(self.heat.min()) if lo is None else lo
        hi = float(self.heat.max()) if hi is None else hi
        if hi <= lo:
            return np.zeros_like(self.heat)
        return np.clip((self.heat - lo) / (hi - lo), 0.0, 1.0)


def heatmap(img: ImageBuffer, model,
            scales: Sequence[float] = PROTOCOL_SCALES,
            grid: tuple[int, int] = PROTOCOL_GRID,
            blur_radius: float | None = None) -> ScalarField:
    """Composition heatmap: each pixel's raw value is the mean score of
    all windows covering it; the stored heat is that mean under a
    Gaussian blur (radius defaults to 2% of the image diagonal).

    Every pixel must be covered by at least one window (true for the
    standard corner-inclusive lattice), otherwise this raises.
    """
    W, H = img.dims
    rects = sliding_windows(img.dims, scales, grid)
    scores = np.asarray(_resolve_scorer(model)(img, rects), dtype=np.float64)
    score_sum = np.zeros((H, W), dtype=np.float64)
    coverage = np.zeros((H, W), dtype=np.int64)
    for rect, s in zip(rects, scores):
        score_sum[rect.y:rect.y2, rect.x:rect.x2] += s
        coverage[rect.y:rect.y2, rect.x:rect.x2] += 1
    if (coverage == 0).any():
        raise GeometryError("window lattice leaves uncovered pixels; "
                            "include a scale close to 1.0")
    mean = score_sum / coverage
    if blur_radius is None:
        blur_radius = 0.02 * float(np.hypot(W, H))
    heat = ndimage.gaussian_filter(mean, sigma=blur_radius, mode="nearest")
    return ScalarField(score_sum, coverage, heat)


def heat_image(field: ScalarField, lo: float | None = None,
               hi: float | None = None) -> ImageBuffer:
    """Render a field as a grayscale image for PNG export."""
    norm = field.normalized(lo, hi).astype(np.float32)
    return ImageBuffer(np.repeat(norm[:, :, None], 3, axis=2))


def pano_scan(img: ImageBuffer, model,
              sizes: Sequence[tuple[int, int]] | None = None,
              stride_frac: float = PANO_STRIDE_FRAC) -> PanoResult:
    """Best view over the panorama candidate lattice."""
    if sizes is None:
        sizes = default_pano_sizes(img.dims)
    rects = pano_candidates(img.dims, sizes, stride_frac)
    if not rects:
        raise GeometryError(f"no panorama candidates fit image {img.dims}")
    scores = _resolve_scorer(model)(img, rects)
    i = int(np.argmax(scores))
    return PanoResult(ScoredCrop(rects[i], float(scores[i])), len(rects))

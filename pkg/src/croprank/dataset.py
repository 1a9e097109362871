"""Pair mining and manifest handling.

A manifest is the durable record of one mining run: which images were
used, which crops were carved out of each, and the image-level
train/validation split. Training consumes manifests through batch
iterators that pair each crop against its source image at network
resolution.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import CropRect, GeometryError, SamplerConfig, sample_crops
from .imaging import (AugmentConfig, DecodeError, ImageBuffer, augment,
                      extract_crop, load_image, to_net_input)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

_KINDS = ("border", "square")
_SPLITS = ("train", "val")

# Retries when jitter makes two candidates collide on the same rect.
_DUP_RETRIES = 8


class ManifestError(ValueError):
    """Manifest file or mining input violates the pair-manifest contract."""


@dataclass(frozen=True)
class PairRecord:
    """One (source image, crop) ranking pair plus its split assignment."""

    image_path: str
    crop: CropRect
    kind: str
    scale: float
    split: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ManifestError(f"unknown crop kind {self.kind!r}")
        if self.split not in _SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if not 0.0 < self.scale < 1.0:
            raise ManifestError(f"scale must lie in (0,1), got {self.scale}")


@dataclass
class PairManifest:
    """All pairs mined from one corpus, with the sampler that produced them."""

    sampler: SamplerConfig
    val_fraction: float
    records: list[PairRecord] = field(default_factory=list)
    skipped: int = 0
    version: int = MANIFEST_VERSION

    @property
    def seed(self) -> int:
        return self.sampler.seed

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0}
        for r in self.records:
            out[r.split] += 1
        return out

    def split_records(self, split: str) -> list[PairRecord]:
        if split not in _SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def image_paths(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.image_path)
        return list(seen)


def list_image_files(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise ManifestError(f"image directory not found: {root}")
    files = [p for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: str(p.relative_to(root)))


def _sample_unique(dims, sampler: SamplerConfig, rng) -> list:
    """Sample one image's candidates, redrawing if jitter collides."""
    for _ in range(_DUP_RETRIES):
        cands = sample_crops(dims, sampler, rng)
        rects = {c.rect.as_tuple() for c in cands}
        if len(rects) == len(cands):
            return cands
    raise GeometryError(f"could not draw {sampler.crops_per_image} distinct "
                        f"crops for a {dims[0]}x{dims[1]} image")


def mine_pairs(image_dir, sampler: SamplerConfig = SamplerConfig(),
               val_fraction: float = 0.19) -> PairManifest:
    """Mine ranking pairs from every decodable image under image_dir.

    Images are listed in sorted relative-path order; each gets its own rng
    derived from (sampler.seed, index), so output is reproducible and
    insensitive to how many crops earlier images consumed. The split is
    image-level: all of an image's crops land on one side. Undecodable
    files are skipped and counted.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ManifestError(f"val_fraction must lie in [0,1), got {val_fraction}")
    root = Path(image_dir)
    paths = list_image_files(root)
    dims_by_path: list[tuple[str, tuple[int, int]]] = []
    skipped = 0
    for p in paths:
        try:
            img = load_image(p)
        except DecodeError as e:
            log.warning("skipping undecodable image %s: %s", p, e)
            skipped += 1
            continue
        dims_by_path.append((str(p.relative_to(root)), img.dims))
    n = len(dims_by_path)
    if n < 2:
        raise ManifestError(f"need at least 2 decodable images, found {n}")

    perm = np.random.default_rng([sampler.seed, 0]).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0.0:
        n_val = min(max(n_val, 1), n - 1)
    val_idx = set(int(i) for i in perm[:n_val])

    records: list[PairRecord] = []
    for i, (rel, dims) in enumerate(dims_by_path):
        rng = np.random.default_rng([sampler.seed, 1, i])
        split = "val" if i in val_idx else "train"
        for cand in _sample_unique(dims, sampler, rng):
            records.append(PairRecord(rel, cand.rect, cand.kind,
                                      cand.scale, split))
    return PairManifest(sampler, val_fraction, records, skipped)


# ---------------------------------------------------------------------------
# manifest serialization (line-delimited JSON)

def save_manifest(manifest: PairManifest, path) -> None:
    header = {
        "version": manifest.version,
        "seed": manifest.seed,
        "sampler": {
            "scales": list(manifest.sampler.scales),
            "num_square": manifest.sampler.num_square,
            "perturb_frac": manifest.sampler.perturb_frac,
        },
        "val_fraction": manifest.val_fraction,
        "counts": manifest.counts(),
        "skipped": manifest.skipped,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for r in manifest.records:
        lines.append(json.dumps(
            {"image": r.image_path, "crop": list(r.crop.as_tuple()),
             "kind": r.kind, "scale": r.scale, "split": r.split},
            separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> PairManifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    lines = text.splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")

    def parse(line_no: int, line: str) -> dict:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{line_no}: invalid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}:{line_no}: expected an object")
        return obj

    header = parse(1, lines[0])
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: unsupported manifest version {header.get('version')!r}")
    try:
        sampler = SamplerConfig(scales=tuple(header["sampler"]["scales"]),
                                num_square=header["sampler"]["num_square"],
                                perturb_frac=header["sampler"]["perturb_frac"],
                                seed=header["seed"])
        val_fraction = float(header.get("val_fraction", 0.0))
    except (KeyError, TypeError, GeometryError) as e:
        raise ManifestError(f"{path}: bad header: {e}") from e

    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = parse(line_no, line)
        try:
            crop = obj["crop"]
            if len(crop) != 4 or any(int(v) != v for v in crop):
                raise ManifestError(f"{path}:{line_no}: crop must be four ints")
            rect = CropRect(*(int(v) for v in crop))
            records.append(PairRecord(obj["image"], rect, obj["kind"],
                                      float(obj["scale"]), obj["split"]))
        except (KeyError, TypeError, GeometryError, ManifestError) as e:
            raise ManifestError(f"{path}:{line_no}: bad record: {e}") from e

    seen: set[tuple] = set()
    for r in records:
        key = (r.image_path, r.crop.as_tuple())
        if key in seen:
            raise ManifestError(f"{path}: duplicate entry for {r.image_path} "
                                f"crop {r.crop.as_tuple()}")
        seen.add(key)

    manifest = PairManifest(sampler, val_fraction, records,
                            int(header.get("skipped", 0)))
    if "counts" in header and header["counts"] != manifest.counts():
        raise ManifestError(f"{path}: header counts {header['counts']} do not "
                            f"match records {manifest.counts()}")
    return manifest


# ---------------------------------------------------------------------------
# batch assembly

class ShuffledCursor:
    """Deterministic index stream: a fresh seeded permutation per epoch."""

    def __init__(self, n: int, seed: int):
        if n <= 0:
            raise ValueError("cursor needs at least one record")
        self.n = n
        self.seed = seed
        self.epoch = 0
        self._perm = np.random.default_rng([seed, 0]).permutation(n)
        self._pos = 0

    def next_index(self) -> int:
        if self._pos == self.n:
            self.epoch += 1
            self._perm = np.random.default_rng(
                [self.seed, self.epoch]).permutation(self.n)
            self._pos = 0
        idx = int(self._perm[self._pos])
        self._pos += 1
        return idx

    def take(self, k: int) -> list[int]:
        return [self.next_index() for _ in range(k)]


class _ImageCache:
    """Small LRU over decoded images to keep batch assembly off the disk."""

    def __init__(self, root, max_entries: int = 64):
        self.root = Path(root) if root is not None else None
        self.max_entries = max_entries
        self._store: OrderedDict[str, ImageBuffer] = OrderedDict()

    def get(self, rel_path: str) -> ImageBuffer:
        if rel_path in self._store:
            self._store.move_to_end(rel_path)
            return self._store[rel_path]
        path = self.root / rel_path if self.root is not None else Path(rel_path)
        img = load_image(path)
        self._store[rel_path] = img
        if len(self._store) > self.max_entries:
            self._store.popitem(last=False)
        return img


def _record_inputs(record: PairRecord, cache: _ImageCache
                   ) -> tuple[ImageBuffer, ImageBuffer]:
    src = cache.get(record.image_path)
    if not record.crop.inside(src.dims):
        raise ManifestError(f"crop {record.crop} exceeds image "
                            f"{record.image_path} ({src.width}x{src.height})")
    full = to_net_input(src)
    crop = to_net_input(extract_crop(src, record.crop))
    return full, crop


def iter_split_pairs(manifest: PairManifest, split: str, image_root=None
                     ) -> Iterator[tuple[ImageBuffer, ImageBuffer]]:
    """One identity-transform pass over a split, in manifest order."""
    cache = _ImageCache(image_root)
    for record in manifest.split_records(split):
        yield _record_inputs(record, cache)


def iter_batches(manifest: PairManifest, split: str, batch_pairs: int,
                 epoch_seed: int, augment_cfg: AugmentConfig | None = None,
                 image_root=None) -> Iterator[list[tuple[ImageBuffer, ImageBuffer]]]:
    """Endless stream of batches over one split.

    Records are drawn through a per-epoch reshuffled cursor, so every
    record appears exactly once per epoch and the stream is a pure
    function of epoch_seed. Augmentation (train only; pass None for the
    identity) is applied independently to both sides of a pair.
    Undecodable images are substituted by the next record and logged.
    """
    if batch_pairs <= 0:
        raise ValueError("batch_pairs must be positive")
    records = manifest.split_records(split)
    if not records:
        raise ManifestError(f"split {split!r} has no records")
    cursor = ShuffledCursor(len(records), epoch_seed)
    cache = _ImageCache(image_root)
    aug_rng = (np.random.default_rng([augment_cfg.seed, epoch_seed])
               if augment_cfg is not None else None)
    while True:
        batch: list[tuple[ImageBuffer, ImageBuffer]] = []
        while len(batch) < batch_pairs:
            record = records[cursor.next_index()]
            try:
                full, crop = _record_inputs(record, cache)
            except DecodeError as e:
                log.warning("substituting next record for %s: %s",
                            record.image_path, e)
                continue
            if augment_cfg is not None:
                full = augment(full, augment_cfg, aug_rng)
                crop = augment(crop, augment_cfg, aug_rng)
            batch.append((full, crop))
        yield batch


def cached_pair_features(manifest: PairManifest, split: str, params,
                         image_root=None, chunk: int = 32
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Precompute pooled features for every pair in a split.

    Only valid for frozen backbones: features are computed once and
    reused across iterations. Returns (full_features, crop_features)
    row-aligned with split_records(split).
    """
    from .ranker import features_from_images

    records = manifest.split_records(split)
    if not records:
        raise ManifestError(f"split {split!r} has no records")
    cache = _ImageCache(image_root)

    full_by_image: dict[str, np.ndarray] = {}
    crop_feats = np.empty((len(records), params.spec.feature_dim),
                          dtype=np.float32)
    # group records by image so each source is decoded and resized once
    order: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        order.setdefault(r.image_path, []).append(i)

    pending_imgs: list[ImageBuffer] = []
    # ("full", image_path) or ("crop", record_row)
    pending_slots: list[tuple[str, object]] = []

    def flush():
        nonlocal pending_imgs, pending_slots
        if not pending_imgs:
            return
        feats = features_from_images(pending_imgs, params, chunk=chunk)
        for (kind, key), vec in zip(pending_slots, feats):
            if kind == "full":
                full_by_image[key] = vec
            else:
                crop_feats[key] = vec
        pending_imgs, pending_slots = [], []

    for path, rows in order.items():
        src = cache.get(path)
        pending_imgs.append(to_net_input(src))
        pending_slots.append(("full", path))
        for row in rows:
            rect = records[row].crop
            if not rect.inside(src.dims):
                raise ManifestError(f"crop {rect} exceeds image {path} "
                                    f"({src.width}x{src.height})")
            pending_imgs.append(to_net_input(extract_crop(src, rect)))
            pending_slots.append(("crop", row))
        if len(pending_imgs) >= chunk:
            flush()
    flush()

    full_feats = np.empty_like(crop_feats)
    for i, r in enumerate(records):
        full_feats[i] = full_by_image[r.image_path]
    return full_feats, crop_feats

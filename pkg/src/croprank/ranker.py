"""Pairwise ranking scorer: head network, hinge loss, trainer, checkpoints.

The scorer maps a pooled feature vector through fc1 (width 1000, ReLU)
and fc2 (single neuron) to a scalar composition score. Training
minimizes the pairwise hinge loss max(0, gap + score(crop) -
score(source)) over mined (source, crop) pairs with classical
SGD-momentum, selecting the checkpoint with minimum validation loss.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as F
from .features import BackboneSpec, SppConfig, NonFiniteError, _check_finite
from .imaging import AugmentConfig, ImageBuffer

FC1_WIDTH = 1000

# Pairs per sub-batch when backpropagating through the conv stack; keeps
# the im2col buffers bounded without changing the summed result.
_CHUNK_PAIRS = 16

CHECKPOINT_MAGIC = b"VFNC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or malformed."""


class CheckpointFormatError(CheckpointError):
    """Bad magic or unsupported version."""


class CheckpointChecksumError(CheckpointError):
    """Trailing CRC does not match the payload."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good checkpoint (or None)."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class TrainingInterrupted(RuntimeError):
    """Interrupt during training; carries the last validated checkpoint."""

    def __init__(self, checkpoint=None):
        super().__init__("training interrupted")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class ModelSpec:
    """Backbone plus pooling choice; fixes the head input width."""

    backbone: BackboneSpec = BackboneSpec()
    spp: SppConfig | None = SppConfig()

    @property
    def feature_dim(self) -> int:
        c = self.backbone.out_channels
        if self.spp is None:
            return F.flatten_output_dim(c, F.MAP_SIDE)
        return F.spp_output_dim(c, F.MAP_SIDE, self.spp)

    def head_tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.feature_dim
        return {"fc1_w": (d, FC1_WIDTH), "fc1_b": (FC1_WIDTH,),
                "fc2_w": (FC1_WIDTH,), "fc2_b": (1,)}

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = dict(self.backbone.tensor_shapes())
        shapes.update(self.head_tensor_shapes())
        return shapes

    def to_config(self) -> dict:
        return {
            "backbone": {"kind": self.backbone.kind,
                         "channels": list(self.backbone.channels)},
            "spp": (None if self.spp is None
                    else {"sizes": list(self.spp.sizes), "mode": self.spp.mode}),
            "fc_width": FC1_WIDTH,
        }

    @staticmethod
    def from_config(cfg: dict) -> "ModelSpec":
        if cfg.get("fc_width", FC1_WIDTH) != FC1_WIDTH:
            raise CheckpointFormatError(
                f"unsupported fc width {cfg.get('fc_width')}")
        bb = BackboneSpec(kind=cfg["backbone"]["kind"],
                          channels=tuple(cfg["backbone"]["channels"]))
        spp = cfg.get("spp")
        spp_cfg = None if spp is None else SppConfig(tuple(spp["sizes"]), spp["mode"])
        return ModelSpec(bb, spp_cfg)


@dataclass
class RankerParams:
    """All weights plus momentum state, keyed by tensor name."""

    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["fc1_w"].dtype

    def trainable_names(self) -> list[str]:
        names = []
        if self.spec.backbone.trainable:
            names.extend(self.spec.backbone.tensor_shapes())
        names.extend(self.spec.head_tensor_shapes())
        return names

    def copy(self) -> "RankerParams":
        return RankerParams(self.spec,
                            {k: v.copy() for k, v in self.tensors.items()},
                            {k: v.copy() for k, v in self.velocity.items()})


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> RankerParams:
    """Fan-in scaled Gaussian weights (std sqrt(2/fan_in)), zero biases,
    zero momentum; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    tensors = F.init_backbone_params(spec.backbone, rng, dtype)
    d = spec.feature_dim
    tensors["fc1_w"] = rng.normal(0.0, np.sqrt(2.0 / d),
                                  size=(d, FC1_WIDTH)).astype(dtype)
    tensors["fc1_b"] = np.zeros(FC1_WIDTH, dtype=dtype)
    tensors["fc2_w"] = rng.normal(0.0, np.sqrt(2.0 / FC1_WIDTH),
                                  size=(FC1_WIDTH,)).astype(dtype)
    tensors["fc2_b"] = np.zeros(1, dtype=dtype)
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
    return RankerParams(spec, tensors, velocity)


# ---------------------------------------------------------------------------
# forward / backward

def _head_forward(feats: np.ndarray, params: RankerParams, need_cache: bool):
    t = params.tensors
    z1 = feats @ t["fc1_w"] + t["fc1_b"]
    _check_finite("fc1", z1)
    a1 = np.maximum(z1, 0)
    s = a1 @ t["fc2_w"] + t["fc2_b"][0]
    _check_finite("fc2", s)
    cache = (feats, z1 > 0, a1) if need_cache else None
    return s, cache


def _head_backward(ds: np.ndarray, cache, params: RankerParams):
    feats, relu_mask, a1 = cache
    t = params.tensors
    grads = {
        "fc2_w": a1.T @ ds,
        "fc2_b": np.array([ds.sum()], dtype=ds.dtype),
    }
    dz1 = np.outer(ds, t["fc2_w"]) * relu_mask
    grads["fc1_w"] = feats.T @ dz1
    grads["fc1_b"] = dz1.sum(axis=0)
    dfeats = dz1 @ t["fc1_w"].T
    return grads, dfeats


def _pool_forward(maps: np.ndarray, spec: ModelSpec, need_cache: bool):
    if spec.spp is None:
        vec, shape = F.flatten_pool_batch(maps)
        return vec, ("flatten", shape)
    vec, cache = F.spp_pool_batch(maps, spec.spp, need_cache=need_cache)
    return vec, ("spp", cache)


def _pool_backward(dvec: np.ndarray, pool_cache, spec: ModelSpec):
    kind, cache = pool_cache
    if kind == "flatten":
        return F.flatten_backward_batch(dvec, cache)
    return F.spp_backward_batch(dvec, cache, spec.spp)


def images_to_batch(images: list[ImageBuffer], dtype) -> np.ndarray:
    """Stack 227x227 buffers into an NCHW array of the requested dtype."""
    arrs = []
    for img in images:
        if img.dims != (F.NET_INPUT_SIDE, F.NET_INPUT_SIDE):
            raise ValueError(f"network input must be {F.NET_INPUT_SIDE}x"
                             f"{F.NET_INPUT_SIDE}, got {img.dims}")
        arrs.append(img.data.transpose(2, 0, 1))
    return np.stack(arrs).astype(dtype, copy=False)


def features_from_images(images: list[ImageBuffer], params: RankerParams,
                         chunk: int = 32) -> np.ndarray:
    """Forward a list of 227x227 buffers to pooled feature vectors."""
    out = []
    for i in range(0, len(images), chunk):
        x = images_to_batch(images[i:i + chunk], params.dtype)
        maps, _ = F.backbone_forward_batch(x, params.tensors, params.spec.backbone)
        vec, _ = _pool_forward(maps, params.spec, need_cache=False)
        out.append(vec)
    return np.concatenate(out, axis=0)


def score(feature: np.ndarray, params: RankerParams) -> float:
    """Score one pooled feature vector."""
    feature = np.asarray(feature)
    if feature.shape != (params.spec.feature_dim,):
        raise ValueError(f"feature must have shape ({params.spec.feature_dim},), "
                         f"got {feature.shape}")
    s, _ = _head_forward(feature[None, :].astype(params.dtype), params, False)
    return float(s[0])


def score_features(feats: np.ndarray, params: RankerParams) -> np.ndarray:
    if feats.ndim != 2 or feats.shape[1] != params.spec.feature_dim:
        raise ValueError(f"features must be Nx{params.spec.feature_dim}, "
                         f"got {feats.shape}")
    s, _ = _head_forward(feats.astype(params.dtype, copy=False), params, False)
    return s


def pair_loss(score_full: float, score_crop: float, gap: float) -> float:
    """Hinge penalty: zero once the source outscores the crop by >= gap."""
    if gap <= 0:
        raise ValueError("gap must be positive")
    return max(0.0, gap + score_crop - score_full)


def _hinge_from_scores(s_full, s_crop, gap, dtype):
    margins = gap + s_crop - s_full
    viol = margins > 0
    loss = float(margins[viol].sum())
    ds_full = -viol.astype(dtype)
    ds_crop = viol.astype(dtype)
    return loss, ds_full, ds_crop


def _zero_grads(params: RankerParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(params.tensors[name])
            for name in params.trainable_names()}


def batch_loss_and_grads(batch, params: RankerParams, gap: float):
    """Summed hinge loss and parameter gradients for a batch of
    (full_input, crop_input) pairs.

    Pairs may be 227x227 ImageBuffers (gradients flow through the
    backbone when it is trainable) or precomputed feature vectors
    (head-only). Satisfied pairs contribute zero loss and zero gradient.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    if gap <= 0:
        raise ValueError("gap must be positive")
    if isinstance(batch[0][0], ImageBuffer):
        return _loss_and_grads_images(batch, params, gap)
    return _loss_and_grads_features(batch, params, gap)


def _loss_and_grads_features(batch, params, gap):
    full = np.stack([np.asarray(p[0]) for p in batch]).astype(params.dtype, copy=False)
    crop = np.stack([np.asarray(p[1]) for p in batch]).astype(params.dtype, copy=False)
    d = params.spec.feature_dim
    if full.shape[1] != d or crop.shape[1] != d:
        raise ValueError(f"feature vectors must have length {d}")
    n = full.shape[0]
    feats = np.concatenate([full, crop], axis=0)
    s, cache = _head_forward(feats, params, need_cache=True)
    loss, ds_full, ds_crop = _hinge_from_scores(s[:n], s[n:], gap, params.dtype)
    ds = np.concatenate([ds_full, ds_crop])
    grads, _ = _head_backward(ds, cache, params)
    if params.spec.backbone.trainable:
        # image gradients are undefined for feature batches; conv tensors
        # simply receive no update
        pass
    return loss, grads


def _loss_and_grads_images(batch, params, gap):
    spec = params.spec
    trainable_bb = spec.backbone.trainable
    total = 0.0
    grads = _zero_grads(params)
    for start in range(0, len(batch), _CHUNK_PAIRS):
        part = batch[start:start + _CHUNK_PAIRS]
        n = len(part)
        x = images_to_batch([p[0] for p in part] + [p[1] for p in part],
                            params.dtype)
        maps, bb_cache = F.backbone_forward_batch(
            x, params.tensors, spec.backbone, need_cache=trainable_bb)
        feats, pool_cache = _pool_forward(maps, spec, need_cache=True)
        s, head_cache = _head_forward(feats, params, need_cache=True)
        loss, ds_full, ds_crop = _hinge_from_scores(s[:n], s[n:], gap, params.dtype)
        total += loss
        ds = np.concatenate([ds_full, ds_crop])
        head_grads, dfeats = _head_backward(ds, head_cache, params)
        for k, v in head_grads.items():
            grads[k] += v
        if trainable_bb:
            dmaps = _pool_backward(dfeats, pool_cache, spec)
            bb_grads = F.backbone_backward_batch(dmaps, bb_cache, spec.backbone)
            for k, v in bb_grads.items():
                grads[k] += v
    return total, grads


def sgd_momentum_step(params: RankerParams, grads: dict[str, np.ndarray],
                      lr: float, momentum: float) -> RankerParams:
    """Classical momentum update, in place: v <- momentum*v + g;
    p <- p - lr*v. Returns the same params object."""
    for name, g in grads.items():
        v = params.velocity[name]
        v *= momentum
        v += g
        params.tensors[name] -= lr * v
    return params


# ---------------------------------------------------------------------------
# checkpoints

@dataclass(frozen=True)
class Checkpoint:
    """Inference artifact: model spec, float32 tensors, provenance."""

    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    iteration: int
    val_loss: float
    extra: dict = field(default_factory=dict)

    def to_params(self) -> RankerParams:
        tensors = {k: v.copy() for k, v in self.tensors.items()}
        velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
        return RankerParams(self.spec, tensors, velocity)


def checkpoint_from_params(params: RankerParams, iteration: int,
                           val_loss: float, extra: dict | None = None) -> Checkpoint:
    tensors = {k: v.astype(np.float32) for k, v in params.tensors.items()}
    return Checkpoint(params.spec, tensors, iteration, float(val_loss),
                      dict(extra or {}))


def _checkpoint_header(ckpt: Checkpoint, names: list[str]) -> bytes:
    header = {
        "spec": ckpt.spec.to_config(),
        "iteration": ckpt.iteration,
        "val_loss": ckpt.val_loss,
        "tensors": names,
        "extra": ckpt.extra,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: magic, u32 version, length-tagged JSON spec
    block, per-tensor (u32 rank, u32 dims, float32 data) records, then a
    CRC32 of everything before it."""
    names = list(ckpt.spec.tensor_shapes())
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += np.uint32(CHECKPOINT_VERSION).tobytes()
    header = _checkpoint_header(ckpt, names)
    blob += np.uint32(len(header)).tobytes()
    blob += header
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        blob += np.uint32(arr.ndim).tobytes()
        blob += np.asarray(arr.shape, dtype="<u4").tobytes()
        blob += arr.tobytes()
    blob += np.uint32(zlib.crc32(bytes(blob)) & 0xFFFFFFFF).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    crc_stored = int(np.frombuffer(raw[-4:], dtype="<u4")[0])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    off = 12 + hlen
    try:
        header = json.loads(raw[12:off].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header") from e
    spec = ModelSpec.from_config(header["spec"])
    shapes = spec.tensor_shapes()
    tensors = {}
    body = raw[:-4]
    for name in header["tensors"]:
        if name not in shapes:
            raise CheckpointFormatError(f"{path}: unexpected tensor {name!r}")
        rank = int(np.frombuffer(body[off:off + 4], dtype="<u4")[0])
        off += 4
        dims = tuple(int(d) for d in
                     np.frombuffer(body[off:off + 4 * rank], dtype="<u4"))
        off += 4 * rank
        if dims != shapes[name]:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {dims}, expected {shapes[name]}")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(body[off:off + 4 * count], dtype="<f4")
        if arr.size != count:
            raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
        off += 4 * count
        tensors[name] = arr.reshape(dims).copy()
    if off != len(body):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensors")
    return Checkpoint(spec, tensors, int(header["iteration"]),
                      float(header["val_loss"]), dict(header.get("extra", {})))


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule. Defaults follow the standard recipe: lr 0.01
    dropping to 0.002 after 10k iterations, momentum 0.9, 100-pair
    batches, 15k iterations, validation every 1k."""

    lr_initial: float = 0.01
    lr_after: float = 0.002
    lr_switch_iter: int = 10000
    momentum: float = 0.9
    batch_pairs: int = 100
    total_iters: int = 15000
    validate_every: int = 1000
    gap: float = 1.0
    seed: int = 0
    augment: AugmentConfig | None = None
    cache_features: bool | None = None  # None: auto (cache iff backbone frozen)

    def __post_init__(self):
        if min(self.lr_initial, self.lr_after, self.batch_pairs,
               self.total_iters, self.validate_every, self.gap) <= 0:
            raise ValueError("all schedule values must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.lr_switch_iter < self.total_iters:
            raise ValueError("lr_switch_iter must lie inside the run")

    def lr_at(self, iteration: int) -> float:
        return self.lr_initial if iteration <= self.lr_switch_iter else self.lr_after

    def to_config(self) -> dict:
        return {
            "lr_initial": self.lr_initial, "lr_after": self.lr_after,
            "lr_switch_iter": self.lr_switch_iter, "momentum": self.momentum,
            "batch_pairs": self.batch_pairs, "total_iters": self.total_iters,
            "validate_every": self.validate_every, "gap": self.gap,
            "seed": self.seed,
        }


def _scale_grads(grads: dict[str, np.ndarray], factor: float) -> None:
    """The optimizer descends the mean pair loss: batch-sum gradients are
    rescaled in place before the momentum step."""
    for g in grads.values():
        g *= factor


def _mean_val_loss(full_feats, crop_feats, params, gap, chunk=4096):
    total = 0.0
    n = full_feats.shape[0]
    for i in range(0, n, chunk):
        sf = score_features(full_feats[i:i + chunk], params)
        sc = score_features(crop_feats[i:i + chunk], params)
        m = gap + sc - sf
        total += float(m[m > 0].sum())
    return total / n


def train_on_features(train_full: np.ndarray, train_crop: np.ndarray,
                      val_full: np.ndarray, val_crop: np.ndarray,
                      cfg: TrainConfig, params: RankerParams,
                      on_validate=None) -> Checkpoint:
    """Head-only training over precomputed feature pairs; returns the
    checkpoint with minimum validation loss (earliest on ties)."""
    from .dataset import ShuffledCursor

    if train_full.shape[0] == 0 or val_full.shape[0] == 0:
        raise ValueError("train and validation splits must be nonempty")
    cursor = ShuffledCursor(train_full.shape[0], cfg.seed)
    best = None  # (val_loss, iteration, tensors)
    run_loss, run_batches = 0.0, 0
    try:
        for it in range(1, cfg.total_iters + 1):
            idx = cursor.take(cfg.batch_pairs)
            loss, grads = _loss_and_grads_features(
                list(zip(train_full[idx], train_crop[idx])), params, cfg.gap)
            _scale_grads(grads, 1.0 / cfg.batch_pairs)
            sgd_momentum_step(params, grads, cfg.lr_at(it), cfg.momentum)
            run_loss += loss / cfg.batch_pairs
            run_batches += 1
            if it % cfg.validate_every == 0 or it == cfg.total_iters:
                vl = _mean_val_loss(val_full, val_crop, params, cfg.gap)
                if best is None or vl < best[0]:
                    best = (vl, it, {k: v.astype(np.float32)
                                     for k, v in params.tensors.items()})
                if on_validate is not None:
                    on_validate(it, run_loss / max(run_batches, 1), vl)
                run_loss, run_batches = 0.0, 0
    except NonFiniteError as e:
        ckpt = (Checkpoint(params.spec, best[2], best[1], best[0])
                if best else None)
        raise TrainingDiverged(str(e), ckpt) from e
    except KeyboardInterrupt:
        if best is None:
            vl = _mean_val_loss(val_full, val_crop, params, cfg.gap)
            best = (vl, 0, {k: v.astype(np.float32)
                            for k, v in params.tensors.items()})
        raise TrainingInterrupted(Checkpoint(params.spec, best[2],
                                             best[1], best[0]))
    return Checkpoint(params.spec, best[2], best[1], best[0])


def train(manifest, cfg: TrainConfig, init: RankerParams,
          image_root=None, on_validate=None) -> Checkpoint:
    """Full training entry: mines batches from a pair manifest, optionally
    caching frozen-backbone features, and runs the schedule.

    Deterministic given cfg.seed. Validation always bypasses augmentation.
    """
    from . import dataset as ds  # local import to avoid a cycle

    cache = cfg.cache_features
    if cache is None:
        cache = not init.spec.backbone.trainable
    if cache and init.spec.backbone.trainable:
        raise ValueError("feature caching requires a frozen backbone "
                         "(BackboneSpec kind 'fixed')")

    if cache:
        if cfg.augment is not None:
            raise ValueError("augmentation is unavailable with cached "
                             "features; train on images instead")
        tf, tc = ds.cached_pair_features(manifest, "train", init, image_root)
        vf, vc = ds.cached_pair_features(manifest, "val", init, image_root)
        return train_on_features(tf, tc, vf, vc, cfg, init, on_validate)
    return _train_on_images(manifest, cfg, init, image_root, on_validate)


def _train_on_images(manifest, cfg, params, image_root, on_validate):
    from . import dataset as ds

    n_train = len(manifest.split_records("train"))
    n_val = len(manifest.split_records("val"))
    if n_train == 0 or n_val == 0:
        raise ValueError("train and validation splits must be nonempty")
    batches = ds.iter_batches(manifest, "train", cfg.batch_pairs,
                              epoch_seed=cfg.seed, augment_cfg=cfg.augment,
                              image_root=image_root)
    best = None
    run_loss, run_batches = 0.0, 0
    try:
        for it in range(1, cfg.total_iters + 1):
            batch = next(batches)
            loss, grads = batch_loss_and_grads(batch, params, cfg.gap)
            _scale_grads(grads, 1.0 / cfg.batch_pairs)
            sgd_momentum_step(params, grads, cfg.lr_at(it), cfg.momentum)
            run_loss += loss / cfg.batch_pairs
            run_batches += 1
            if it % cfg.validate_every == 0 or it == cfg.total_iters:
                vl = _validate_on_images(manifest, params, cfg, image_root)
                if best is None or vl < best[0]:
                    best = (vl, it, {k: v.astype(np.float32)
                                     for k, v in params.tensors.items()})
                if on_validate is not None:
                    on_validate(it, run_loss / max(run_batches, 1), vl)
                run_loss, run_batches = 0.0, 0
    except NonFiniteError as e:
        ckpt = (Checkpoint(params.spec, best[2], best[1], best[0])
                if best else None)
        raise TrainingDiverged(str(e), ckpt) from e
    except KeyboardInterrupt:
        if best is None:
            vl = _validate_on_images(manifest, params, cfg, image_root)
            best = (vl, 0, {k: v.astype(np.float32)
                            for k, v in params.tensors.items()})
        raise TrainingInterrupted(Checkpoint(params.spec, best[2],
                                             best[1], best[0]))
    return Checkpoint(params.spec, best[2], best[1], best[0])


def _validate_on_images(manifest, params, cfg, image_root):
    from . import dataset as ds

    total, n = 0.0, 0
    for full_img, crop_img in ds.iter_split_pairs(manifest, "val", image_root):
        feats = features_from_images([full_img, crop_img], params)
        s = score_features(feats, params)
        total += pair_loss(float(s[0]), float(s[1]), cfg.gap)
        n += 1
    return total / n

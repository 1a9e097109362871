"""Convolutional backbone and spatial-pyramid feature aggregation.

The backbone is a small three-conv stack whose geometry mirrors the
classic 227 -> 55 -> 27 -> 13 reduction, so a 227x227x3 input always
yields a C x 13 x 13 activation map. On top of that map, ``spp_pool``
aggregates max- or average-pooled windows of several sizes (stride one
less than the window) into a single feature vector; a pass-through
flatten is available as the no-pyramid variant.

Everything here is plain numpy with explicit backward passes, batched
over the leading axis. Single-image wrappers (`backbone_forward`,
`spp_pool`, `spp_backward`) sit on top of the batched kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import ImageBuffer, NET_INPUT_SIDE

MAP_SIDE = 13

# (kernel, stride, pad) per conv layer; pools are 3x3 stride 2.
_CONV1 = (11, 4, 0)
_CONV2 = (3, 1, 1)
_CONV3 = (3, 1, 1)
_POOL_K, _POOL_S = 3, 2


class NonFiniteError(RuntimeError):
    """A layer produced NaN or infinite activations."""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"non-finite activation in layer {layer!r}")


def _check_finite(layer: str, arr: np.ndarray) -> None:
    # A single sum is non-finite iff the array contains NaN/inf (or has
    # diverged far enough to overflow, which is equally fatal).
    if not np.isfinite(float(arr.sum())):
        raise NonFiniteError(layer)


@dataclass(frozen=True)
class BackboneSpec:
    """Declares the conv stack: three layers of the given output channels.

    kind "toy" trains end to end; kind "fixed" keeps the same geometry but
    freezes its randomly initialized weights, so only the scoring head
    learns. The final channel count is the feature-map depth C.
    """

    kind: str = "toy"
    channels: tuple[int, int, int] = (16, 32, 16)

    def __post_init__(self):
        if self.kind not in ("toy", "fixed"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError(f"need three positive channel counts, got {self.channels}")

    @property
    def out_channels(self) -> int:
        return self.channels[2]

    @property
    def trainable(self) -> bool:
        return self.kind == "toy"

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2, c3 = self.channels
        return {
            "conv1_w": (c1, 3, _CONV1[0], _CONV1[0]), "conv1_b": (c1,),
            "conv2_w": (c2, c1, _CONV2[0], _CONV2[0]), "conv2_b": (c2,),
            "conv3_w": (c3, c2, _CONV3[0], _CONV3[0]), "conv3_b": (c3,),
        }


@dataclass(frozen=True)
class FeatureMap:
    """C x H x W activations from the last conv layer."""

    channels: int
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.channels, self.height, self.width):
            raise ValueError(
                f"data shape {self.data.shape} != "
                f"({self.channels},{self.height},{self.width})")
        if not np.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")


@dataclass(frozen=True)
class SppConfig:
    """Pyramid pooling windows. Stride is always one less than the window
    (floored at 1 for degenerate 1x1 windows)."""

    sizes: tuple[int, ...] = (3, 5, 7)
    mode: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(k) for k in self.sizes))
        if not self.sizes or any(k < 1 for k in self.sizes):
            raise ValueError(f"pool sizes must be >= 1, got {self.sizes}")
        if self.mode not in ("max", "avg"):
            raise ValueError(f"pool mode must be 'max' or 'avg', got {self.mode!r}")


def pool_positions(side: int, k: int) -> list[int]:
    """Window start offsets along one axis for size k, stride k-1."""
    stride = max(1, k - 1)
    return list(range(0, side - k + 1, stride))


def spp_output_dim(channels: int, side: int, cfg: SppConfig) -> int:
    bins = 0
    for k in cfg.sizes:
        if k > side:
            raise ValueError(f"pool size {k} exceeds map side {side}")
        n = len(pool_positions(side, k))
        bins += n * n
    return bins * channels


def flatten_output_dim(channels: int, side: int) -> int:
    return channels * side * side


# ---------------------------------------------------------------------------
# conv / pool kernels (batched, NCHW)

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(N,C,H,W) -> (N, oh*ow, C*k*k) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, oh * ow, c * k * k), (oh, ow)


def _conv_forward(x, w, b, ksp, need_cache):
    k, stride, pad = ksp
    n = x.shape[0]
    c_out = w.shape[0]
    cols, (oh, ow) = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(c_out, -1).T
    y += b
    y = y.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    cache = (cols, x.shape, w, ksp, (oh, ow)) if need_cache else None
    return np.ascontiguousarray(y), cache


def _conv_backward(dy, cache):
    cols, x_shape, w, (k, stride, pad), (oh, ow) = cache
    n, c_out = dy.shape[0], dy.shape[1]
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(n, oh * ow, c_out)
    dw = np.tensordot(dy_flat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dy_flat.sum(axis=(0, 1))
    dcols = dy_flat @ w.reshape(c_out, -1)
    # scatter patches back (col2im): one vectorized add per kernel offset
    _, c_in, h, w_in = x_shape
    hp, wp = h + 2 * pad, w_in + 2 * pad
    dxp = np.zeros((n, c_in, hp, wp), dtype=dy.dtype)
    dcols = dcols.reshape(n, oh, ow, c_in, k, k)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:hp - pad, pad:wp - pad] if pad else dxp
    return dx, dw, db


def _maxpool_forward(x, need_cache):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (_POOL_K, _POOL_K), axis=(2, 3))[:, :, ::_POOL_S, ::_POOL_S]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, _POOL_K * _POOL_K)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, x.shape, (oh, ow)) if need_cache else None
    return np.ascontiguousarray(y), cache


def _maxpool_backward(dy, cache):
    arg, x_shape, (oh, ow) = cache
    n, c = x_shape[0], x_shape[1]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ni, ci, yi, xi = np.indices((n, c, oh, ow), sparse=True)
    iy = yi * _POOL_S + arg // _POOL_K
    ix = xi * _POOL_S + arg % _POOL_K
    np.add.at(dx, (ni, ci, iy, ix), dy)
    return dx


def init_backbone_params(spec: BackboneSpec, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled Gaussian weights (std sqrt(2/fan_in)), zero biases."""
    params = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return params


def backbone_forward_batch(x: np.ndarray, params: dict, spec: BackboneSpec,
                           need_cache: bool = False):
    """(N,3,227,227) -> (N,C,13,13); optionally keeps caches for backward."""
    if x.ndim != 4 or x.shape[1:] != (3, NET_INPUT_SIDE, NET_INPUT_SIDE):
        raise ValueError(f"backbone expects Nx3x{NET_INPUT_SIDE}x{NET_INPUT_SIDE}, "
                         f"got {x.shape}")
    caches = []
    a = x
    for li, (wk, bk, ksp) in enumerate(
            [("conv1_w", "conv1_b", _CONV1),
             ("conv2_w", "conv2_b", _CONV2),
             ("conv3_w", "conv3_b", _CONV3)], start=1):
        z, ccache = _conv_forward(a, params[wk], params[bk], ksp, need_cache)
        _check_finite(f"conv{li}", z)
        a = np.maximum(z, 0)
        relu_mask = a > 0 if need_cache else None
        pcache = None
        if li < 3:
            a, pcache = _maxpool_forward(a, need_cache)
        caches.append((ccache, relu_mask, pcache))
    return a, (caches if need_cache else None)


def backbone_backward_batch(dmap: np.ndarray, caches, spec: BackboneSpec) -> dict:
    """Gradients of all backbone tensors given d(loss)/d(feature map)."""
    grads = {}
    da = dmap
    for li in (3, 2, 1):
        ccache, relu_mask, pcache = caches[li - 1]
        if pcache is not None:
            da = _maxpool_backward(da, pcache)
        dz = da * relu_mask
        da, dw, db = _conv_backward(dz, ccache)
        grads[f"conv{li}_w"] = dw
        grads[f"conv{li}_b"] = db
    return grads


def backbone_forward(img227: ImageBuffer, params: dict,
                     spec: BackboneSpec) -> FeatureMap:
    """Single-image forward pass; input must be exactly 227x227x3."""
    if img227.dims != (NET_INPUT_SIDE, NET_INPUT_SIDE):
        raise ValueError(f"backbone input must be {NET_INPUT_SIDE}x"
                         f"{NET_INPUT_SIDE}, got {img227.dims}")
    x = img227.data.transpose(2, 0, 1)[None, ...]
    x = x.astype(params["conv1_w"].dtype, copy=False)
    fmap, _ = backbone_forward_batch(x, params, spec)
    c = spec.out_channels
    return FeatureMap(c, MAP_SIDE, MAP_SIDE, fmap[0])


# ---------------------------------------------------------------------------
# spatial pyramid pooling

def spp_pool_batch(maps: np.ndarray, cfg: SppConfig, need_cache: bool = False):
    """(N,C,H,W) -> (N,D). Bins are laid out size-major, then channel, then
    window row-major; D = sum_k C * n_k^2."""
    n, c, h, w = maps.shape
    parts = []
    caches = []
    for k in cfg.sizes:
        if k > min(h, w):
            raise ValueError(f"pool size {k} exceeds map side {min(h, w)}")
        stride = max(1, k - 1)
        win = sliding_window_view(maps, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        ny, nx = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, ny, nx, k * k)
        if cfg.mode == "max":
            arg = flat.argmax(axis=-1)
            pooled = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            caches.append((k, stride, ny, nx, arg))
        else:
            pooled = flat.mean(axis=-1)
            caches.append((k, stride, ny, nx, None))
        parts.append(pooled.reshape(n, c * ny * nx))
    out = np.concatenate(parts, axis=1)
    return (out, ((n, c, h, w), caches)) if need_cache else (out, None)


def spp_backward_batch(dvec: np.ndarray, cache, cfg: SppConfig) -> np.ndarray:
    """Route bin gradients back onto the map. Max sends each bin's gradient
    to its argmax cell (first index on ties); avg spreads it uniformly.
    Overlapping windows accumulate."""
    (n, c, h, w), caches = cache
    dmaps = np.zeros((n, c, h, w), dtype=dvec.dtype)
    offset = 0
    for (k, stride, ny, nx, arg) in caches:
        span = c * ny * nx
        dpart = dvec[:, offset:offset + span].reshape(n, c, ny, nx)
        offset += span
        if cfg.mode == "max":
            ni, ci, yi, xi = np.indices((n, c, ny, nx), sparse=True)
            iy = yi * stride + arg // k
            ix = xi * stride + arg % k
            np.add.at(dmaps, (ni, ci, iy, ix), dpart)
        else:
            g = dpart / (k * k)
            for i in range(k):
                for j in range(k):
                    dmaps[:, :, i:i + ny * stride:stride,
                          j:j + nx * stride:stride] += g
    return dmaps


def spp_pool(fmap: FeatureMap, cfg: SppConfig) -> np.ndarray:
    """Single-map pyramid pooling to a flat feature vector."""
    out, _ = spp_pool_batch(fmap.data[None, ...], cfg)
    return out[0]


def spp_backward(fmap: FeatureMap, cfg: SppConfig,
                 upstream: np.ndarray) -> np.ndarray:
    """d(bins)->d(map) for a single map; returns a C x H x W gradient."""
    expected = spp_output_dim(fmap.channels, fmap.height, cfg)
    if upstream.shape != (expected,):
        raise ValueError(f"upstream gradient must have shape ({expected},), "
                         f"got {upstream.shape}")
    _, cache = spp_pool_batch(fmap.data[None, ...], cfg, need_cache=True)
    return spp_backward_batch(upstream[None, :], cache, cfg)[0]


def flatten_pool_batch(maps: np.ndarray):
    n = maps.shape[0]
    return maps.reshape(n, -1), maps.shape


def flatten_backward_batch(dvec: np.ndarray, shape) -> np.ndarray:
    return dvec.reshape(shape)

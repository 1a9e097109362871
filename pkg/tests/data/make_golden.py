"""Regenerate the frozen fixtures in this directory.

Run from the repository root:  python3 tests/data/make_golden.py
Only rerun after the numeric kernels have been re-verified against the
finite-difference and reference oracles; the fixtures pin today's bytes.
"""
from pathlib import Path

import numpy as np

from croprank.features import (BackboneSpec, backbone_forward,
                               init_backbone_params)
from croprank.imaging import ImageBuffer

HERE = Path(__file__).resolve().parent


def golden_feature_map() -> None:
    spec = BackboneSpec("fixed", (4, 6, 4))
    params = init_backbone_params(spec, np.random.default_rng(2024),
                                  np.float32)
    px = np.linspace(0.0, 1.0, 227 * 227 * 3, dtype=np.float32)
    img = ImageBuffer(np.sin(px * 37.0).reshape(227, 227, 3) * 0.5 + 0.5)
    fmap = backbone_forward(img, params, spec)
    np.save(HERE / "golden_feature_map.npy", fmap.data)
    print("golden_feature_map.npy", fmap.data.shape, fmap.data.dtype)


if __name__ == "__main__":
    golden_feature_map()

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from croprank import dataset, ranker, synth
from croprank.features import BackboneSpec, SppConfig
from croprank.geometry import SamplerConfig


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 12-scene synthetic corpus shared by IO-heavy tests."""
    root = tmp_path_factory.mktemp("corpus")
    synth.generate_corpus(root, n=12, seed=101)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    return dataset.mine_pairs(tiny_corpus / "train",
                              SamplerConfig(seed=5), val_fraction=0.25)


@pytest.fixture(scope="session")
def small_params():
    """Frozen-backbone params small enough for fast scoring tests."""
    spec = ranker.ModelSpec(BackboneSpec("fixed", (4, 6, 4)), SppConfig())
    return ranker.init_params(spec, seed=9)


@pytest.fixture(scope="session")
def trained_tiny(tiny_corpus, tiny_manifest, small_params):
    """A briefly trained checkpoint over the tiny corpus."""
    cfg = ranker.TrainConfig(total_iters=60, validate_every=20,
                             lr_switch_iter=40, batch_pairs=16, seed=3)
    return ranker.train(tiny_manifest, cfg, small_params.copy(),
                        image_root=tiny_corpus / "train")


def random_rect(rng, canvas, min_side=1):
    W, H = canvas
    w = int(rng.integers(min_side, W + 1))
    h = int(rng.integers(min_side, H + 1))
    x = int(rng.integers(0, W - w + 1))
    y = int(rng.integers(0, H - h + 1))
    return x, y, w, h


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def datadir():
    return Path(__file__).parent / "data"

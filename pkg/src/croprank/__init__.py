"""croprank: learning-to-rank photo composition toolkit.

Mines (image, crop) ranking pairs from well-composed photos, trains a
pairwise hinge-loss scorer on pyramid-pooled conv features, and applies
the scorer to best-crop search, composition heatmaps, panorama view
suggestion, and benchmark evaluation.

Submodules are imported lazily so the CLI can pin thread-count env vars
before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "imaging",
    "features",
    "ranker",
    "dataset",
    "search",
    "evaluation",
    "synth",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))

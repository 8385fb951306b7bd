"""Joint alignment of feature-map collections with Lie-group spatial transformers."""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "lie",
    "warp",
    "tensorio",
    "features",
    "nets",
    "training",
    "evaluation",
    "cli",
    "climain",
)


def __getattr__(name):
    # Lazy submodule access keeps `import congeal` free of numpy so the CLI
    # can pin BLAS thread counts before any numeric code loads.
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

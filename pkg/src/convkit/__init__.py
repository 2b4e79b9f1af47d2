"""CPU convolutional-network engine and evaluation toolkit.

Submodules: tensor (typed arrays and GEMM), layers (forward/backward
kernels), network (specs, weights, preprocessing, execution, SGD),
features (extraction and storage), classifiers (linear probes and split
protocols), embed (exact t-SNE), profiler (per-layer timing), plotting
(figure helpers), cli (command-line front end).

Importing the package itself stays lightweight; submodules pull in numpy
on first use so the CLI can configure threading beforehand.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "layers", "network", "features", "classifiers",
    "embed", "profiler", "plotting", "cli", "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))

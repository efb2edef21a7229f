"""Learned sparse block-sampling matrices with a from-scratch training
stack: constrained convolutional sampling, a small reconstruction
network, a DCT-domain ISTA/FISTA solver, and comparison tooling against
Gaussian baselines.

Submodules load lazily so the CLI can apply the DSMM_THREADS cap to the
BLAS pools before numpy is imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("checkpoint", "cli", "errors", "evaluation", "gradcheck",
               "image_io", "matrix_io", "reconstruction", "sampling",
               "seeding", "solver", "tensor_ops", "training")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))

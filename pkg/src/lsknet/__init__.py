"""Large-selective-kernel backbone toolkit.

A from-scratch implementation of dilated depth-wise kernel decomposition with
spatial kernel selection: the numeric kernels (forward and explicit backward),
the selection module / block / four-stage backbone, closed-form cost
accounting, selection-behavior analysis, binary tensor/weight formats and a
CLI.

Submodules are imported lazily so the CLI can configure threading before the
numeric backend loads; ``from lsknet import ops`` and friends work as usual.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "analysis",
    "backbone",
    "block",
    "cli",
    "cost",
    "errors",
    "fileio",
    "gradcheck",
    "module",
    "ops",
    "plan",
    "train",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)

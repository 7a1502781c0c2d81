"""alseg: a deterministic active-learning benchmark engine for binary segmentation.

Core names are re-exported lazily so that importing the package (as the
command-line entry point does) stays free of numpy side effects until the
CLI has pinned the threading environment.
"""

__version__ = "0.1.0"

_CORE_EXPORTS = (
    "STRATEGIES",
    "CapabilityError",
    "Embedding",
    "EngineError",
    "ExperimentConfig",
    "InvalidConfigError",
    "InvalidSelectionError",
    "MissingLabelError",
    "PatchSample",
    "PoolState",
    "ProbabilityMap",
    "extend_pool",
    "init_pool",
)

__all__ = ["__version__", *_CORE_EXPORTS]


def __getattr__(name):
    if name in _CORE_EXPORTS:
        from . import core

        return getattr(core, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)

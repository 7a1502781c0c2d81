"""Shared domain types and labeled-pool bookkeeping.

Everything downstream (scoring, training, the driver loop) works against the
types defined here. Pool state is immutable: the driver replaces it on every
acquisition step, so worker code can hold read-only references safely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

NUM_CLASSES = 2

STRATEGIES = (
    "random",
    "max_entropy",
    "least_confidence",
    "bald",
    "kmeans",
    "coreset",
)


class EngineError(Exception):
    """Base class for engine-level failures."""


class InvalidConfigError(EngineError, ValueError):
    """An experiment configuration that cannot be run."""


class InvalidSelectionError(EngineError, ValueError):
    """A sample selection that violates pool bookkeeping rules."""


class CapabilityError(EngineError, RuntimeError):
    """A strategy requires a predictor capability that is not provided."""


class MissingLabelError(EngineError, LookupError):
    """The oracle was queried for an index it has no ground truth for."""


@dataclass(frozen=True)
class PatchSample:
    """One grayscale patch, optionally carrying its ground-truth mask.

    pixels is an H x W array of floats in [0, 1]; mask, when present, is an
    H x W array of {0, 1}. pool_index is the patch's position in the fixed
    sample table of its pool.
    """

    pixels: np.ndarray
    pool_index: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {pixels.shape}")
        h, w = pixels.shape
        if h < 8 or w < 8:
            raise ValueError(f"patch must be at least 8x8, got {h}x{w}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.pool_index < 0:
            raise ValueError(f"pool_index must be >= 0, got {self.pool_index}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=np.uint8)
            if mask.shape != pixels.shape:
                raise ValueError(
                    f"mask shape {mask.shape} != pixels shape {pixels.shape}"
                )
            if not np.isin(mask, (0, 1)).all():
                raise ValueError("mask must contain only 0 or 1")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    def with_mask(self, mask: np.ndarray) -> "PatchSample":
        return PatchSample(self.pixels, self.pool_index, mask)

    def without_mask(self) -> "PatchSample":
        return PatchSample(self.pixels, self.pool_index, None)


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel class distribution, shape H x W x NUM_CLASSES.

    Normalization is checked here so every predictor output is validated at
    the boundary.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 3 or probs.shape[-1] != NUM_CLASSES:
            raise ValueError(
                f"probs must have shape HxWx{NUM_CLASSES}, got {probs.shape}"
            )
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = probs.sum(axis=-1, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > 1e-6:
            raise ValueError(f"pixel distributions must sum to 1 (off by {err:.3g})")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def shape(self):
        return self.probs.shape


@dataclass(frozen=True)
class Embedding:
    """Fixed-length feature vector extracted from the predictor bottleneck."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("embedding entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PoolState:
    """Indexed pool [0, n) with the ordered labeled subset and iteration count.

    The labeled tuple keeps insertion order, so the acquisition history
    ("which round picked which sample") stays recoverable from the state
    alone.
    """

    n: int
    labeled: tuple[int, ...]
    iteration: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidConfigError(f"pool size must be positive, got {self.n}")
        if len(set(self.labeled)) != len(self.labeled):
            raise InvalidSelectionError("labeled indices must be distinct")
        for i in self.labeled:
            if not 0 <= i < self.n:
                raise InvalidSelectionError(f"labeled index {i} outside [0, {self.n})")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    @property
    def labeled_set(self) -> frozenset[int]:
        return frozenset(self.labeled)

    def unlabeled(self) -> list[int]:
        """All indices not yet labeled, in ascending order."""
        known = set(self.labeled)
        return [i for i in range(self.n) if i not in known]


def init_pool(n: int, m: int, rng_seed: int) -> PoolState:
    """Draw the initial labeled set: m distinct indices, uniform over [0, n)."""
    if m <= 0:
        raise InvalidConfigError(f"initial label count must be positive, got {m}")
    if m > n:
        raise InvalidConfigError(f"cannot draw {m} initial labels from a pool of {n}")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(n, size=m, replace=False)
    return PoolState(n=n, labeled=tuple(int(i) for i in chosen), iteration=0)


def extend_pool(state: PoolState, new_indices) -> PoolState:
    """Add newly labeled indices to the pool state and advance the iteration.

    Raises InvalidSelectionError on duplicates, already-labeled indices, or
    indices outside [0, n).
    """
    new_indices = [int(i) for i in new_indices]
    if len(set(new_indices)) != len(new_indices):
        raise InvalidSelectionError(f"duplicate indices in selection: {new_indices}")
    known = state.labeled_set
    for i in new_indices:
        if not 0 <= i < state.n:
            raise InvalidSelectionError(f"index {i} outside [0, {state.n})")
        if i in known:
            raise InvalidSelectionError(f"index {i} is already labeled")
    return PoolState(
        n=state.n,
        labeled=state.labeled + tuple(new_indices),
        iteration=state.iteration + 1,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one active-learning run.

    Defaults follow the reference protocol (m=20, n=2000, k=20, 25
    iterations at patch size 128, initial training at lr 1e-3 for 500
    epochs, finetuning at lr 5e-4 for 200 epochs). The engine extras
    (batch_size, base_width, dropout_rate) parameterize the bundled
    predictor and default to its reference desk-scale settings.
    """

    m: int = 20
    n: int = 2000
    k: int = 20
    iterations: int = 25
    patch_size: int = 128
    initial_lr: float = 1e-3
    initial_epochs: int = 500
    finetune_lr: float = 5e-4
    finetune_epochs: int = 200
    mc_passes: int = 16
    seed: int = 0
    strategy: str = "random"
    batch_size: int = 8
    base_width: int = 8
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(
                f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}"
            )
        for name in ("m", "n", "k"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.iterations < 0:
            raise InvalidConfigError("iteration count must be >= 0")
        if self.m + self.k * self.iterations > self.n:
            raise InvalidConfigError(
                f"label budget m + k*T = {self.m + self.k * self.iterations} "
                f"exceeds pool size n = {self.n}"
            )
        if self.patch_size % 4 != 0:
            raise InvalidConfigError(
                f"patch_size must be a multiple of 4, got {self.patch_size}"
            )
        if self.initial_lr <= 0 or self.finetune_lr <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if self.initial_epochs < 0 or self.finetune_epochs < 0:
            raise InvalidConfigError("epoch counts must be >= 0")
        if self.mc_passes < 1:
            raise InvalidConfigError("mc_passes must be >= 1")
        if self.seed < 0:
            raise InvalidConfigError("seed must be >= 0")
        if self.batch_size <= 0:
            raise InvalidConfigError("batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfigError("dropout_rate must lie in [0, 1)")

    def with_updates(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)

    @property
    def total_labels(self) -> int:
        """Labels consumed by a full run, initial seed set included."""
        return self.m + self.k * self.iterations

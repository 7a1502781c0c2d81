"""The experiment driver: a simulated oracle, the iterated select-label-train
loop, and learning-curve capture.

Every random choice in a run draws from its own named child stream of the
experiment seed, so replay is exact no matter how callers chunk, thread, or
reorder the surrounding work. In particular each (iteration, pool index)
pair owns its dropout-mask stream, which keeps stochastic scoring identical
between sequential and fanned-out evaluation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO

import numpy as np

from .core import (
    CapabilityError,
    ExperimentConfig,
    InvalidConfigError,
    MissingLabelError,
    PatchSample,
    PoolState,
    extend_pool,
    init_pool,
)
from .metrics_report import binarize, mean_jaccard
from .predictor import MiniSegNet, TrainHyper
from .strategies import (
    ScoredSample,
    aggregate_mc,
    score_least_confidence,
    score_max_entropy,
    select_coreset,
    select_kmeans,
    select_random,
    select_top_k,
)

# Child-stream tags. Values are arbitrary but frozen: changing them changes
# every derived seed and therefore every archived result.
_STREAM_POOL_INIT = 1
_STREAM_MODEL_INIT = 2
_STREAM_TRAIN = 3  # + phase (0 = initial, t = finetune after iteration t)
_STREAM_SELECT = 4  # + iteration
_STREAM_MC = 5  # + iteration, + pool index


def derive_seed(root: int, *tags: int) -> int:
    """Stable child seed for a named stream of the experiment seed."""
    return int(np.random.SeedSequence((root,) + tags).generate_state(1)[0])


class SimulatedOracle:
    """Label provider backed by ground truth, with a query audit log.

    Built from fully labeled source patches whose pool indices cover
    [0, n) exactly. query_log records every index ever queried, in order,
    so tests can audit the label budget of a run.
    """

    def __init__(self, samples: Sequence[PatchSample]):
        by_index: dict[int, PatchSample] = {}
        for s in samples:
            if s.mask is None:
                raise ValueError(f"oracle source sample {s.pool_index} has no mask")
            if s.pool_index in by_index:
                raise ValueError(f"duplicate pool index {s.pool_index}")
            by_index[s.pool_index] = s
        if not by_index:
            raise ValueError("oracle needs at least one sample")
        n = len(by_index)
        missing = [i for i in range(n) if i not in by_index]
        if missing:
            raise ValueError(f"pool indices must cover [0, {n}); missing {missing[:5]}")
        self._samples = by_index
        self.query_log: list[int] = []

    @property
    def n(self) -> int:
        return len(self._samples)

    @property
    def ground_truth(self) -> dict[int, np.ndarray]:
        return {i: s.mask for i, s in self._samples.items()}

    def unlabeled_pool(self) -> list[PatchSample]:
        """The public view of the pool: every sample with its mask stripped."""
        return [self._samples[i].without_mask() for i in range(self.n)]

    def query(self, index: int) -> PatchSample:
        if index not in self._samples:
            raise MissingLabelError(f"no ground truth for pool index {index}")
        self.query_log.append(int(index))
        return self._samples[index]


def build_pool(samples: Sequence[PatchSample]) -> tuple[SimulatedOracle, list[PatchSample]]:
    """Split labeled source patches into (oracle, unlabeled pool)."""
    oracle = SimulatedOracle(samples)
    return oracle, oracle.unlabeled_pool()


def query_oracle(oracle: SimulatedOracle, indices: Sequence[int]) -> list[PatchSample]:
    """Fetch labeled samples for the given pool indices; idempotent."""
    return [oracle.query(int(i)) for i in indices]


@dataclass(frozen=True)
class LearningCurve:
    """Test-set Jaccard as a function of labels consumed, for one run."""

    strategy: str
    seed: int
    points: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        points = tuple((int(n), float(j)) for n, j in self.points)
        if not points:
            raise ValueError("a learning curve needs at least one point")
        for (a, _), (b, _) in zip(points, points[1:]):
            if b <= a:
                raise ValueError(f"labels_used must strictly increase, got {a} then {b}")
        for _, j in points:
            if not 0.0 <= j <= 1.0:
                raise ValueError(f"jaccard {j} outside [0, 1]")
        object.__setattr__(self, "points", points)

    @property
    def final_jaccard(self) -> float:
        return self.points[-1][1]

    @property
    def final_labels(self) -> int:
        return self.points[-1][0]


def _predict_all(model, samples):
    if hasattr(model, "predict_batch"):
        return model.predict_batch(samples)
    return [model.predict(s) for s in samples]


def _embed_all(model, samples):
    if hasattr(model, "embed_batch"):
        return model.embed_batch(samples)
    return [model.embed(s) for s in samples]


def _stochastic_all(model, samples, rngs):
    if hasattr(model, "predict_stochastic_batch"):
        return model.predict_stochastic_batch(samples, rngs)
    return [model.predict_stochastic(s, r) for s, r in zip(samples, rngs)]


def _evaluate(model, test_set) -> float:
    maps = _predict_all(model, test_set)
    return mean_jaccard((s.mask, binarize(p)) for s, p in zip(test_set, maps))


def _select(
    config: ExperimentConfig,
    model,
    pool: Sequence[PatchSample],
    state: PoolState,
    t: int,
) -> tuple[int, ...]:
    unlabeled = state.unlabeled()
    strategy = config.strategy
    if strategy == "random":
        seed = derive_seed(config.seed, _STREAM_SELECT, t)
        return select_random(unlabeled, config.k, seed).chosen

    if strategy in ("max_entropy", "least_confidence"):
        maps = _predict_all(model, [pool[i] for i in unlabeled])
        if strategy == "max_entropy":
            scores = [ScoredSample(i, score_max_entropy(p)) for i, p in zip(unlabeled, maps)]
            return select_top_k(scores, config.k, "maximize").chosen
        scores = [ScoredSample(i, score_least_confidence(p)) for i, p in zip(unlabeled, maps)]
        return select_top_k(scores, config.k, "minimize").chosen

    if strategy == "bald":
        samples = [pool[i] for i in unlabeled]
        rngs = [
            np.random.default_rng(derive_seed(config.seed, _STREAM_MC, t, i))
            for i in unlabeled
        ]
        per_pass = [_stochastic_all(model, samples, rngs) for _ in range(config.mc_passes)]
        scores = []
        for j, i in enumerate(unlabeled):
            mean_map = aggregate_mc([maps[j] for maps in per_pass])
            scores.append(ScoredSample(i, score_max_entropy(mean_map)))
        return select_top_k(scores, config.k, "maximize").chosen

    if strategy == "kmeans":
        embeddings = _embed_all(model, [pool[i] for i in unlabeled])
        seed = derive_seed(config.seed, _STREAM_SELECT, t)
        return select_kmeans(list(zip(unlabeled, embeddings)), config.k, seed).chosen

    if strategy == "coreset":
        embeddings = _embed_all(model, pool)
        pairs = list(zip(range(state.n), embeddings))
        return select_coreset(pairs, state.labeled_set, config.k).chosen

    raise InvalidConfigError(f"unknown strategy {strategy!r}")


def _emit(stream: Optional[TextIO], iteration: int, labels: int, jaccard: float, t0: float) -> None:
    if stream is None:
        return
    record = {
        "iteration": iteration,
        "labels_used": labels,
        "jaccard": jaccard,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    stream.write(json.dumps(record) + "\n")
    stream.flush()


def run_experiment(
    config: ExperimentConfig,
    train_pool: Sequence[PatchSample],
    test_set: Sequence[PatchSample],
    oracle: SimulatedOracle,
    model=None,
    progress: Optional[TextIO] = None,
) -> LearningCurve:
    """Run the full active-learning protocol and return its learning curve.

    Phases: seed the pool with m oracle-labeled samples and train from
    scratch; then for each of config.iterations rounds, score or embed the
    unlabeled pool as the strategy requires, pick k samples, label them via
    the oracle, finetune on all labels gathered so far, and evaluate on the
    held-out test set. The curve gains one point after initial training and
    one per round. Fully deterministic given config.seed.
    """
    if len(train_pool) != config.n:
        raise InvalidConfigError(f"pool has {len(train_pool)} samples, config.n = {config.n}")
    for i, s in enumerate(train_pool):
        if s.pool_index != i:
            raise InvalidConfigError(f"pool sample at position {i} has pool_index {s.pool_index}")
        if s.mask is not None:
            raise InvalidConfigError(f"pool sample {i} entered the pool labeled")
    if not test_set:
        raise ValueError("test set is empty")
    for s in test_set:
        if s.mask is None:
            raise ValueError("every test sample needs a ground-truth mask")
    if oracle.n != config.n:
        raise InvalidConfigError(f"oracle covers {oracle.n} indices, config.n = {config.n}")

    if model is None:
        model = MiniSegNet(
            base_width=config.base_width,
            dropout_rate=config.dropout_rate,
            rng_seed=derive_seed(config.seed, _STREAM_MODEL_INIT),
        )
    if config.strategy in ("kmeans", "coreset") and not (
        hasattr(model, "embed") or hasattr(model, "embed_batch")
    ):
        raise CapabilityError(f"strategy {config.strategy!r} needs an embedding-capable predictor")
    if config.strategy == "bald" and not (
        hasattr(model, "predict_stochastic") or hasattr(model, "predict_stochastic_batch")
    ):
        raise CapabilityError("strategy 'bald' needs a stochastic-prediction-capable predictor")

    t0 = time.perf_counter()
    state = init_pool(config.n, config.m, derive_seed(config.seed, _STREAM_POOL_INIT))
    labeled: dict[int, PatchSample] = {
        s.pool_index: s for s in query_oracle(oracle, state.labeled)
    }
    model.train(
        [labeled[i] for i in state.labeled],
        TrainHyper(
            config.initial_lr,
            config.initial_epochs,
            config.batch_size,
            derive_seed(config.seed, _STREAM_TRAIN, 0),
        ),
    )
    points = [(config.m, _evaluate(model, test_set))]
    _emit(progress, 0, points[-1][0], points[-1][1], t0)

    for t in range(1, config.iterations + 1):
        chosen = _select(config, model, train_pool, state, t)
        state = extend_pool(state, chosen)
        for s in query_oracle(oracle, chosen):
            labeled[s.pool_index] = s
        model.train(
            [labeled[i] for i in state.labeled],
            TrainHyper(
                config.finetune_lr,
                config.finetune_epochs,
                config.batch_size,
                derive_seed(config.seed, _STREAM_TRAIN, t),
            ),
        )
        points.append((config.m + t * config.k, _evaluate(model, test_set)))
        _emit(progress, t, points[-1][0], points[-1][1], t0)

    return LearningCurve(strategy=config.strategy, seed=config.seed, points=tuple(points))

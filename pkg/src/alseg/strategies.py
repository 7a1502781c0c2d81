"""Sample-selection criteria: uncertainty scores, embedding-based selectors,
and the random baseline.

Scores are always accumulated in double precision; summing many small log
terms over thousands of pixels in single precision loses the rank fidelity
the selectors depend on. Every tie anywhere is broken toward the lower pool
index, so selections are fully reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import Embedding, ProbabilityMap


class ScoredSample(NamedTuple):
    pool_index: int
    score: float


@dataclass(frozen=True)
class SelectionResult:
    """k chosen pool indices plus, when available, the scores behind them."""

    chosen: tuple[int, ...]
    per_sample_scores: Optional[tuple[ScoredSample, ...]] = None


def score_max_entropy(pmap: ProbabilityMap) -> float:
    """Cumulative per-pixel Shannon entropy, natural log, 0*ln(0) := 0.

    Lies in [0, N*ln(C)]; the upper bound is attained exactly when every
    pixel distribution is uniform, i.e. when there is no consensus at all
    on the predicted classes.
    """
    p = np.asarray(pmap.probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-terms.sum())


def score_least_confidence(pmap: ProbabilityMap) -> float:
    """Cumulative maximum class probability; lies in [N/C, N].

    Low totals mean the predictor lacks confidence in its own argmax
    labeling, so selection minimizes this score.
    """
    p = np.asarray(pmap.probs, dtype=np.float64)
    return float(p.max(axis=-1).sum())


def aggregate_mc(maps: Sequence[ProbabilityMap]) -> ProbabilityMap:
    """Per-pixel arithmetic mean of Monte-Carlo probability maps.

    Accumulates deviations from the first map, so averaging T identical
    maps returns the first map bit-for-bit (the dropout-off degeneracy
    that downstream equivalence checks rely on).
    """
    if len(maps) == 0:
        raise ValueError("cannot aggregate an empty list of maps")
    base = np.asarray(maps[0].probs, dtype=np.float64)
    shape = base.shape
    acc = np.zeros_like(base)
    for m in maps[1:]:
        p = np.asarray(m.probs, dtype=np.float64)
        if p.shape != shape:
            raise ValueError(f"map shapes differ: {shape} vs {p.shape}")
        acc += p - base
    return ProbabilityMap(base + acc / len(maps))


def select_top_k(scores: Sequence[ScoredSample], k: int, direction: str) -> SelectionResult:
    """Pick the k best-scoring samples; ties go to the lower pool index.

    Equivalent to k repeated argmax/argmin-and-remove passes over the same
    fixed scores, which is what makes batch querying interchangeable with
    k single queries without retraining in between.
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError(f"direction must be 'maximize' or 'minimize', got {direction!r}")
    scores = list(scores)
    if k > len(scores):
        raise ValueError(f"cannot select {k} from {len(scores)} scored samples")
    for s in scores:
        if not np.isfinite(s.score):
            raise ValueError(f"non-finite score for pool index {s.pool_index}")
    sign = -1.0 if direction == "maximize" else 1.0
    ranked = sorted(scores, key=lambda s: (sign * s.score, s.pool_index))
    chosen = tuple(s.pool_index for s in ranked[:k])
    return SelectionResult(chosen=chosen, per_sample_scores=tuple(scores))


def select_random(unlabeled: Sequence[int], k: int, rng_seed: int) -> SelectionResult:
    """k distinct uniform draws from the unlabeled indices, seeded."""
    unlabeled = list(unlabeled)
    if k > len(unlabeled):
        raise ValueError(f"cannot draw {k} from {len(unlabeled)} unlabeled samples")
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(unlabeled), size=k, replace=False)
    return SelectionResult(chosen=tuple(int(unlabeled[i]) for i in picks))


def _as_matrix(embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Split (index, Embedding) pairs into an index vector and a float64 matrix."""
    indices = np.asarray([int(i) for i, _ in embeddings], dtype=np.int64)
    rows = [np.asarray(e.values if isinstance(e, Embedding) else e, dtype=np.float64)
            for _, e in embeddings]
    if not rows:
        raise ValueError("no embeddings given")
    dim = rows[0].shape[0]
    for r in rows:
        if r.shape != (dim,):
            raise ValueError("embeddings must all share one length")
    return indices, np.stack(rows)


def kmeans_fit(points, k: int, max_iters: int = 100, rng_seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding, single seeded run.

    points may be Embedding objects or raw vectors. Returns (centroids,
    assignment) as float64 arrays of shape (k, D) and (P,). Stops when the
    assignment is stable or after max_iters sweeps; the within-cluster sum
    of squares never increases between sweeps. A cluster that loses all
    its points keeps its previous centroid.
    """
    rows = [np.asarray(p.values if isinstance(p, Embedding) else p, dtype=np.float64)
            for p in points]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(rows):
        raise ValueError(f"cannot fit {k} clusters to {len(rows)} points")
    x = np.stack(rows)
    n = x.shape[0]
    rng = np.random.default_rng(rng_seed)

    # k-means++ seeding: first centroid uniform, the rest proportional to
    # squared distance from the nearest centroid chosen so far.
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    if k > 1:
        d2 = ((x - centroids[0]) ** 2).sum(axis=1)
        for j in range(1, k):
            total = d2.sum()
            if total <= 0.0:
                centroids[j] = x[rng.integers(n)]
            else:
                centroids[j] = x[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    assignment = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = dists.argmin(axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = x[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids, assignment


def select_kmeans(embeddings, k: int, rng_seed: int) -> SelectionResult:
    """Cluster the unlabeled embeddings and pick the sample nearest each centroid.

    When two centroids claim the same nearest sample, the later centroid
    falls through to its next-nearest unclaimed sample, so exactly k
    distinct indices come back. Distance ties go to the lower pool index.
    """
    indices, x = _as_matrix(embeddings)
    if k > len(indices):
        raise ValueError(f"cannot select {k} from {len(indices)} embeddings")
    if k == 0:
        return SelectionResult(chosen=())
    centroids, assignment = kmeans_fit(x, k, rng_seed=rng_seed)
    dists = np.sqrt(((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2))
    chosen: list[int] = []
    taken: set[int] = set()
    for j in range(k):
        order = sorted(range(len(indices)), key=lambda i: (dists[i, j], indices[i]))
        for i in order:
            if i not in taken:
                taken.add(i)
                chosen.append(int(indices[i]))
                break
    nearest = dists[np.arange(len(indices)), assignment]
    scores = tuple(ScoredSample(int(i), float(d)) for i, d in zip(indices, nearest))
    return SelectionResult(chosen=tuple(chosen), per_sample_scores=scores)


def select_coreset(all_embeddings, labeled, k: int) -> SelectionResult:
    """Greedy k-center selection over the embedding space.

    Repeats k times: pick the unlabeled sample whose distance to the
    nearest already-covered point (labeled set plus previous picks) is
    largest, ties to the lower pool index. Needs a nonempty labeled set as
    the anchor of the first max-min step.
    """
    labeled = set(int(i) for i in labeled)
    if not labeled:
        raise ValueError("core-set selection needs a nonempty labeled set")
    indices, x = _as_matrix(all_embeddings)
    pos = {int(idx): i for i, idx in enumerate(indices)}
    missing = labeled - set(pos)
    if missing:
        raise ValueError(f"labeled indices missing from embeddings: {sorted(missing)}")
    unlabeled_rows = [i for i, idx in enumerate(indices) if int(idx) not in labeled]
    if k > len(unlabeled_rows):
        raise ValueError(f"cannot select {k} from {len(unlabeled_rows)} unlabeled samples")

    ux = x[unlabeled_rows]
    uidx = indices[unlabeled_rows]
    lx = x[[pos[i] for i in sorted(labeled)]]
    min_d = np.sqrt(((ux[:, None, :] - lx[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    initial_scores = tuple(
        ScoredSample(int(i), float(d)) for i, d in zip(uidx, min_d)
    )

    chosen: list[int] = []
    active = np.ones(len(unlabeled_rows), dtype=bool)
    d = min_d.copy()
    for _ in range(k):
        best, best_key = -1, None
        for i in np.flatnonzero(active):
            key = (-d[i], int(uidx[i]))
            if best_key is None or key < best_key:
                best, best_key = i, key
        chosen.append(int(uidx[best]))
        active[best] = False
        new_d = np.sqrt(((ux - ux[best]) ** 2).sum(axis=1))
        d = np.minimum(d, new_d)
    return SelectionResult(chosen=tuple(chosen), per_sample_scores=initial_scores)

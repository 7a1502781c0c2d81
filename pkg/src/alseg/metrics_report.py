"""Jaccard scoring, curve aggregation, and CSV export.

All floats are serialized with 9 significant digits (%.9g); reading a file
back and re-exporting it reproduces the bytes exactly, so curve files are
stable fixtures for diffing across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import ProbabilityMap


def jaccard(y, y_hat) -> float:
    """Intersection-over-union of two binary masks.

    Computed as sum(y*yh) / (sum(y) + sum(yh) - sum(y*yh)). Two empty masks
    score 1.0 by convention: an all-background patch predicted as
    all-background is a perfect prediction, not a failed one.
    """
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"mask shapes differ: {y.shape} vs {y_hat.shape}")
    y = y.astype(np.int64)
    y_hat = y_hat.astype(np.int64)
    inter = int((y * y_hat).sum())
    union = int(y.sum()) + int(y_hat.sum()) - inter
    if union == 0:
        return 1.0
    return inter / union


def binarize(pmap: ProbabilityMap) -> np.ndarray:
    """Per-pixel argmax of a probability map; an exact 0.5 tie goes to class 0."""
    probs = pmap.probs
    return (probs[..., 1] > probs[..., 0]).astype(np.uint8)


def mean_jaccard(pairs) -> float:
    """Average per-patch Jaccard over (truth, prediction) mask pairs.

    Patches are weighted equally; pixels are not pooled across patches.
    """
    scores = [jaccard(y, y_hat) for y, y_hat in pairs]
    if not scores:
        raise ValueError("cannot average over zero patches")
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


@dataclass
class CurveBundle:
    """Learning curves grouped by strategy plus per-point summary statistics.

    summary maps (strategy, labels_used) -> (mean, std) where std is the
    sample standard deviation over seeds (ddof=1; 0.0 for a single seed).
    Strategies keep first-appearance order; labels_used grids ascend.
    """

    curves: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def strategies(self) -> list[str]:
        seen = []
        for c in self.curves:
            if c.strategy not in seen:
                seen.append(c.strategy)
        return seen


def aggregate_curves(curves) -> CurveBundle:
    """Group curves by strategy and compute mean/std per labels_used point.

    All curves must share an identical labels_used grid.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to aggregate")
    grid = [p[0] for p in curves[0].points]
    for c in curves[1:]:
        if [p[0] for p in c.points] != grid:
            raise ValueError(
                f"labels_used grids differ: {grid} vs {[p[0] for p in c.points]}"
            )
    summary = {}
    by_strategy = {}
    for c in curves:
        by_strategy.setdefault(c.strategy, []).append(c)
    for strategy, members in by_strategy.items():
        for i, labels_used in enumerate(grid):
            vals = np.asarray([m.points[i][1] for m in members], dtype=np.float64)
            mean = float(vals.mean())
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            summary[(strategy, labels_used)] = (mean, std)
    return CurveBundle(curves=curves, summary=summary)


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _summary_path(path: str) -> str:
    if path.endswith(".csv"):
        return path[: -len(".csv")] + "_summary.csv"
    return path + "_summary.csv"


def export_csv(bundle: CurveBundle, path: str, summary_path: str = None) -> str:
    """Write raw curve rows to `path` and a per-point summary CSV.

    Raw header: strategy,seed,labels_used,jaccard
    Summary header: strategy,labels_used,mean_jaccard,std_jaccard
    The summary lands at summary_path, or `*_summary.csv` next to the raw
    file when not given. Returns the summary file path.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy", "seed", "labels_used", "jaccard"])
        for curve in bundle.curves:
            for labels_used, score in curve.points:
                writer.writerow([curve.strategy, curve.seed, labels_used, _fmt(score)])
    spath = summary_path if summary_path is not None else _summary_path(path)
    with open(spath, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy", "labels_used", "mean_jaccard", "std_jaccard"])
        grid = [p[0] for p in bundle.curves[0].points] if bundle.curves else []
        for strategy in bundle.strategies():
            for labels_used in grid:
                mean, std = bundle.summary[(strategy, labels_used)]
                writer.writerow([strategy, labels_used, _fmt(mean), _fmt(std)])
    return spath


def write_curve_csv(curve, path: str) -> None:
    """Write a single curve in the raw CSV format."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy", "seed", "labels_used", "jaccard"])
        for labels_used, score in curve.points:
            writer.writerow([curve.strategy, curve.seed, labels_used, _fmt(score)])


def read_curve_csv(path: str) -> list:
    """Parse a raw curve CSV back into LearningCurve objects (one per strategy/seed)."""
    from .oracle_loop import LearningCurve

    groups: dict[tuple[str, int], list] = {}
    order: list[tuple[str, int]] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["strategy", "seed", "labels_used", "jaccard"]:
            raise ValueError(f"unexpected curve CSV header: {header}")
        for strategy, seed, labels_used, score in reader:
            key = (strategy, int(seed))
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append((int(labels_used), float(score)))
    return [
        LearningCurve(points=groups[key], strategy=key[0], seed=key[1])
        for key in order
    ]

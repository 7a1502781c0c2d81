"""Tests for Jaccard scoring, curve aggregation, and CSV round-trips."""

import numpy as np
import pytest

from alseg.core import ProbabilityMap
from alseg.metrics_report import (
    CurveBundle,
    aggregate_curves,
    binarize,
    export_csv,
    jaccard,
    mean_jaccard,
    read_curve_csv,
    write_curve_csv,
)
from alseg.oracle_loop import LearningCurve


def _set_iou(y, y_hat):
    """Independent oracle: build the index sets and intersect them."""
    a = {tuple(ij) for ij in np.argwhere(np.asarray(y) == 1)}
    b = {tuple(ij) for ij in np.argwhere(np.asarray(y_hat) == 1)}
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


class TestJaccard:
    def test_identical_masks_score_one(self):
        mask = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        assert jaccard(mask, mask) == 1.0

    def test_disjoint_masks_score_zero(self):
        a = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        b = np.array([[0, 0], [0, 1]], dtype=np.uint8)
        assert jaccard(a, b) == 0.0

    def test_both_empty_score_one(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        assert jaccard(empty, empty) == 1.0

    def test_known_overlap(self):
        a = np.array([[1, 1, 0, 0]], dtype=np.uint8)
        b = np.array([[0, 1, 1, 0]], dtype=np.uint8)
        assert jaccard(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            jaccard(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_matches_set_construction(self):
        """Property: arithmetic IoU equals the set-based definition exactly."""
        rng = np.random.default_rng(23)
        for _ in range(100):
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            p = rng.uniform(0.0, 1.0)
            a = (rng.random(shape) < p).astype(np.uint8)
            b = (rng.random(shape) < p).astype(np.uint8)
            assert jaccard(a, b) == _set_iou(a, b)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = (rng.random((6, 6)) < 0.4).astype(np.uint8)
            b = (rng.random((6, 6)) < 0.4).astype(np.uint8)
            assert jaccard(a, b) == jaccard(b, a)


class TestBinarize:
    def test_argmax_with_tie_to_background(self):
        probs = np.zeros((1, 3, 2))
        probs[0, 0] = (0.9, 0.1)
        probs[0, 1] = (0.5, 0.5)
        probs[0, 2] = (0.2, 0.8)
        out = binarize(ProbabilityMap(probs))
        np.testing.assert_array_equal(out, [[0, 0, 1]])
        assert out.dtype == np.uint8


class TestMeanJaccard:
    def test_weights_patches_equally(self):
        a = np.ones((2, 2), dtype=np.uint8)
        z = np.zeros((2, 2), dtype=np.uint8)
        score = mean_jaccard([(a, a), (a, z)])
        assert score == pytest.approx(0.5)

    def test_empty_input_raises(self):
        with pytest.raises(ValueError):
            mean_jaccard([])


def _curve(strategy, seed, scores, start=10, step=5):
    points = [(start + i * step, s) for i, s in enumerate(scores)]
    return LearningCurve(points=points, strategy=strategy, seed=seed)


class TestAggregateCurves:
    def test_mean_and_sample_std(self):
        curves = [
            _curve("random", 1, [0.2, 0.4]),
            _curve("random", 2, [0.4, 0.8]),
            _curve("random", 3, [0.6, 0.6]),
        ]
        bundle = aggregate_curves(curves)
        vals = np.array([0.2, 0.4, 0.6])
        mean, std = bundle.summary[("random", 10)]
        assert mean == pytest.approx(vals.mean())
        assert std == pytest.approx(vals.std(ddof=1))

    def test_single_seed_std_is_zero(self):
        bundle = aggregate_curves([_curve("bald", 1, [0.3, 0.5])])
        assert bundle.summary[("bald", 15)] == (0.5, 0.0)

    def test_mismatched_grids_raise(self):
        with pytest.raises(ValueError):
            aggregate_curves([_curve("random", 1, [0.2]), _curve("random", 2, [0.2], start=11)])

    def test_strategy_order_is_first_appearance(self):
        bundle = aggregate_curves(
            [_curve("kmeans", 1, [0.2]), _curve("random", 1, [0.2]), _curve("kmeans", 2, [0.3])]
        )
        assert bundle.strategies() == ["kmeans", "random"]

    def test_empty_input_raises(self):
        with pytest.raises(ValueError):
            aggregate_curves([])


class TestCsvRoundTrip:
    def test_single_curve_round_trip(self, tmp_path):
        curve = _curve("max_entropy", 4, [0.25, 1.0 / 3.0, 0.625])
        path = tmp_path / "curve.csv"
        write_curve_csv(curve, str(path))
        (loaded,) = read_curve_csv(str(path))
        assert loaded.strategy == "max_entropy"
        assert loaded.seed == 4
        assert [p[0] for p in loaded.points] == [p[0] for p in curve.points]
        np.testing.assert_allclose(
            [p[1] for p in loaded.points], [p[1] for p in curve.points], atol=1e-9
        )

    def test_parse_then_export_is_a_fixed_point(self, tmp_path):
        """Raw rows carry 9 significant digits, so parsing a file and writing
        it again reproduces the bytes; aggregating parsed curves twice yields
        byte-identical raw and summary files. This is the property that makes
        independently produced runs safe to merge by file."""
        rng = np.random.default_rng(31)
        curves = [
            _curve(strategy, seed, list(rng.uniform(0.0, 1.0, size=4)))
            for strategy in ("random", "coreset")
            for seed in (1, 2)
        ]
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        third = tmp_path / "c.csv"
        export_csv(aggregate_curves(curves), str(first))
        export_csv(aggregate_curves(read_curve_csv(str(first))), str(second))
        assert second.read_bytes() == first.read_bytes()
        export_csv(aggregate_curves(read_curve_csv(str(second))), str(third))
        assert third.read_bytes() == second.read_bytes()
        sb = (tmp_path / "b_summary.csv").read_bytes()
        sc = (tmp_path / "c_summary.csv").read_bytes()
        assert sc == sb

    def test_explicit_summary_path(self, tmp_path):
        bundle = aggregate_curves([_curve("random", 1, [0.5])])
        out = export_csv(bundle, str(tmp_path / "c.csv"), str(tmp_path / "s.csv"))
        assert out == str(tmp_path / "s.csv")
        header = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert header == "strategy,labels_used,mean_jaccard,std_jaccard"

    def test_raw_header_is_stable(self, tmp_path):
        write_curve_csv(_curve("random", 1, [0.5]), str(tmp_path / "c.csv"))
        header = (tmp_path / "c.csv").read_text().splitlines()[0]
        assert header == "strategy,seed,labels_used,jaccard"

    def test_rejects_foreign_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            read_curve_csv(str(path))

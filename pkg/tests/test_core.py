"""Tests for the shared domain types and pool bookkeeping."""

import numpy as np
import pytest

from alseg.core import (
    ExperimentConfig,
    InvalidConfigError,
    InvalidSelectionError,
    PatchSample,
    PoolState,
    ProbabilityMap,
    Embedding,
    extend_pool,
    init_pool,
)


def _patch(fill=0.5, size=16, pool_index=0, mask=None):
    return PatchSample(np.full((size, size), fill, dtype=np.float32), pool_index, mask)


class TestPatchSample:
    def test_pixels_are_float32_and_readonly(self):
        sample = _patch()
        assert sample.pixels.dtype == np.float32
        assert not sample.pixels.flags.writeable

    def test_rejects_non_2d_pixels(self):
        with pytest.raises(ValueError):
            PatchSample(np.zeros(16, dtype=np.float32), 0)

    def test_rejects_tiny_patches(self):
        with pytest.raises(ValueError):
            PatchSample(np.zeros((4, 4), dtype=np.float32), 0)

    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError):
            PatchSample(np.full((16, 16), 1.5, dtype=np.float32), 0)

    def test_rejects_negative_pool_index(self):
        with pytest.raises(ValueError):
            _patch(pool_index=-1)

    def test_mask_shape_must_match(self):
        with pytest.raises(ValueError):
            _patch(mask=np.zeros((8, 8), dtype=np.uint8))

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError):
            _patch(mask=np.full((16, 16), 2, dtype=np.uint8))

    def test_mask_round_trip(self):
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[3:7, 2:9] = 1
        sample = _patch(mask=mask)
        assert sample.labeled
        bare = sample.without_mask()
        assert not bare.labeled
        again = bare.with_mask(mask)
        np.testing.assert_array_equal(again.mask, mask)
        assert again.pool_index == sample.pool_index


class TestProbabilityMap:
    def test_accepts_normalized_map(self):
        probs = np.full((8, 8, 2), 0.5)
        pmap = ProbabilityMap(probs)
        assert pmap.shape == (8, 8, 2)
        assert not pmap.probs.flags.writeable

    def test_rejects_wrong_class_count(self):
        with pytest.raises(ValueError):
            ProbabilityMap(np.full((8, 8, 3), 1.0 / 3.0))

    def test_rejects_unnormalized(self):
        probs = np.full((8, 8, 2), 0.4)
        with pytest.raises(ValueError):
            ProbabilityMap(probs)

    def test_rejects_out_of_range(self):
        probs = np.zeros((8, 8, 2))
        probs[..., 0] = 1.2
        probs[..., 1] = -0.2
        with pytest.raises(ValueError):
            ProbabilityMap(probs)


class TestEmbedding:
    def test_length(self):
        assert len(Embedding(np.arange(5.0))) == 5

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            Embedding(np.zeros((2, 2)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Embedding(np.array([0.0, np.nan]))


class TestPoolState:
    def test_rejects_duplicate_labels(self):
        with pytest.raises(InvalidSelectionError):
            PoolState(n=10, labeled=(1, 1))

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(InvalidSelectionError):
            PoolState(n=10, labeled=(10,))

    def test_unlabeled_is_sorted_complement(self):
        """Property: unlabeled() is exactly the ascending complement of labeled."""
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            m = int(rng.integers(0, n + 1))
            labeled = tuple(int(i) for i in rng.choice(n, size=m, replace=False))
            state = PoolState(n=n, labeled=labeled)
            expected = sorted(set(range(n)) - set(labeled))
            assert state.unlabeled() == expected
            assert state.labeled_set == frozenset(labeled)

    def test_labeled_keeps_insertion_order(self):
        state = PoolState(n=10, labeled=(7, 2, 5))
        assert state.labeled == (7, 2, 5)


class TestInitPool:
    def test_draws_m_distinct_indices(self):
        state = init_pool(n=100, m=20, rng_seed=3)
        assert len(state.labeled) == 20
        assert len(set(state.labeled)) == 20
        assert all(0 <= i < 100 for i in state.labeled)
        assert state.iteration == 0

    def test_deterministic_per_seed(self):
        a = init_pool(n=50, m=10, rng_seed=11)
        b = init_pool(n=50, m=10, rng_seed=11)
        c = init_pool(n=50, m=10, rng_seed=12)
        assert a.labeled == b.labeled
        assert a.labeled != c.labeled

    def test_rejects_oversized_draw(self):
        with pytest.raises(InvalidConfigError):
            init_pool(n=5, m=6, rng_seed=0)


class TestExtendPool:
    def test_appends_and_advances(self):
        state = PoolState(n=10, labeled=(1, 4))
        extended = extend_pool(state, [7, 0])
        assert extended.labeled == (1, 4, 7, 0)
        assert extended.iteration == 1
        assert state.labeled == (1, 4)

    def test_rejects_duplicates_in_selection(self):
        state = PoolState(n=10, labeled=())
        with pytest.raises(InvalidSelectionError):
            extend_pool(state, [3, 3])

    def test_rejects_already_labeled(self):
        state = PoolState(n=10, labeled=(3,))
        with pytest.raises(InvalidSelectionError):
            extend_pool(state, [3])

    def test_rejects_out_of_range(self):
        state = PoolState(n=10, labeled=())
        with pytest.raises(InvalidSelectionError):
            extend_pool(state, [10])


class TestExperimentConfig:
    def test_reference_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.m, cfg.n, cfg.k, cfg.iterations) == (20, 2000, 20, 25)
        assert cfg.patch_size == 128
        assert (cfg.initial_lr, cfg.initial_epochs) == (1e-3, 500)
        assert (cfg.finetune_lr, cfg.finetune_epochs) == (5e-4, 200)
        assert cfg.mc_passes == 16
        assert cfg.strategy == "random"

    def test_total_labels(self):
        cfg = ExperimentConfig(m=10, n=400, k=5, iterations=10, patch_size=32)
        assert cfg.total_labels == 60

    def test_with_updates_returns_new_config(self):
        cfg = ExperimentConfig()
        other = cfg.with_updates(strategy="bald", seed=3)
        assert other.strategy == "bald"
        assert other.seed == 3
        assert cfg.strategy == "random"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"strategy": "gradient_boost"},
            {"m": 0},
            {"k": -1},
            {"n": 50},  # budget 20 + 20*25 exceeds pool
            {"patch_size": 30},
            {"initial_lr": 0.0},
            {"mc_passes": 0},
            {"seed": -1},
            {"dropout_rate": 1.0},
            {"batch_size": 0},
        ],
    )
    def test_rejects_invalid_settings(self, kwargs):
        with pytest.raises(InvalidConfigError):
            ExperimentConfig(**kwargs)

"""Tests for the patch segmenter: architecture, training, stochastic
inference, the gradient check, and checkpointing.

The backward pass is verified against central finite differences, and the
verifier itself is verified by corrupting one analytic entry and watching
the reported error jump.
"""

import struct

import numpy as np
import pytest

from alseg.core import PatchSample
from alseg.predictor import (
    CheckpointError,
    MiniSegNet,
    TrainHyper,
    _layer_table,
    gradient_check,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
)


def _labeled_patch(seed=0, size=16, pool_index=0):
    rng = np.random.default_rng(seed)
    pixels = rng.uniform(0.0, 1.0, size=(size, size)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[:, size // 2 :] = 1
    return PatchSample(pixels, pool_index, mask)


def _expected_param_count(width):
    """Oracle: recount weights and biases straight from the layer table."""
    return sum(k * k * cin * cout + cout for _, k, cin, cout in _layer_table(width))


class TestArchitecture:
    def test_parameter_count_default_width(self):
        model = MiniSegNet(base_width=8)
        assert model.param_count == 29626
        assert model.param_count == _expected_param_count(8)

    def test_parameter_count_other_widths(self):
        for width in (1, 2, 4):
            assert MiniSegNet(base_width=width).param_count == _expected_param_count(width)

    def test_embedding_dim_is_bottleneck_width(self):
        assert MiniSegNet(base_width=8).embedding_dim == 32
        assert MiniSegNet(base_width=3).embedding_dim == 12

    def test_fresh_model_is_exactly_uniform(self):
        """The head starts at zero, so an untrained model emits logits of
        exactly zero and class probabilities of exactly one half."""
        model = MiniSegNet(rng_seed=9)
        pmap = model.predict(_labeled_patch())
        assert np.all(pmap.probs == 0.5)

    def test_init_deterministic_per_seed(self):
        a = MiniSegNet(rng_seed=4)
        b = MiniSegNet(rng_seed=4)
        c = MiniSegNet(rng_seed=5)
        np.testing.assert_array_equal(a.params, b.params)
        assert not np.array_equal(a.params, c.params)

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            MiniSegNet(base_width=0)
        with pytest.raises(ValueError):
            MiniSegNet(dropout_rate=1.0)


class TestShapes:
    def test_predict_output_shape_and_normalization(self):
        model = MiniSegNet(rng_seed=0)
        for size in (16, 32):
            pmap = model.predict(_labeled_patch(size=size))
            assert pmap.shape == (size, size, 2)
            np.testing.assert_allclose(pmap.probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_rectangular_patches_work(self):
        model = MiniSegNet(rng_seed=0)
        pixels = np.zeros((16, 24), dtype=np.float32)
        pmap = model.predict(PatchSample(pixels, 0))
        assert pmap.shape == (16, 24, 2)

    def test_rejects_sides_not_divisible_by_four(self):
        model = MiniSegNet(rng_seed=0)
        with pytest.raises(ValueError):
            model.predict(PatchSample(np.zeros((18, 18), dtype=np.float32), 0))

    def test_embed_length(self):
        model = MiniSegNet(rng_seed=0)
        emb = model.embed(_labeled_patch())
        assert len(emb) == model.embedding_dim

    def test_batch_matches_individual_across_chunks(self):
        """predict_batch chunks internally; results must not depend on it
        beyond last-ulp rounding (the BLAS kernel varies with batch rows)."""
        model = MiniSegNet(rng_seed=2, dropout_rate=0.0)
        samples = [_labeled_patch(seed=i, pool_index=i) for i in range(40)]
        model.train(samples[:2], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=0))
        batch = model.predict_batch(samples)
        for sample, pmap in zip(samples, batch):
            np.testing.assert_allclose(
                pmap.probs, model.predict(sample).probs, atol=1e-6, rtol=0.0
            )


class TestTrainHyper:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainHyper(learning_rate=0.0, epochs=1)
        with pytest.raises(ValueError):
            TrainHyper(learning_rate=1e-3, epochs=-1)
        with pytest.raises(ValueError):
            TrainHyper(learning_rate=1e-3, epochs=1, batch_size=0)

    def test_zero_epochs_allowed(self):
        assert TrainHyper(learning_rate=1e-3, epochs=0).epochs == 0


class TestTraining:
    def test_overfits_one_sample(self):
        """A single labeled patch must be drivable to near-zero loss; this is
        the end-to-end learnability smoke test for the whole backward pass."""
        model = MiniSegNet(rng_seed=1, dropout_rate=0.0)
        sample = _labeled_patch(seed=3)
        model.train([sample], TrainHyper(learning_rate=1e-2, epochs=120, rng_seed=0))
        assert len(model.epoch_losses) == 120
        assert model.epoch_losses[-1] < 0.02
        assert model.epoch_losses[-1] < model.epoch_losses[0] / 10
        predicted = (model.predict(sample).probs[..., 1] > 0.5).astype(np.uint8)
        assert (predicted == sample.mask).mean() > 0.98

    def test_zero_epochs_is_a_no_op(self):
        model = MiniSegNet(rng_seed=1)
        before = model.params.copy()
        model.train([_labeled_patch()], TrainHyper(learning_rate=1e-2, epochs=0))
        np.testing.assert_array_equal(model.params, before)

    def test_training_is_deterministic(self):
        samples = [_labeled_patch(seed=i, pool_index=i) for i in range(4)]
        hyper = TrainHyper(learning_rate=1e-3, epochs=5, batch_size=2, rng_seed=7)
        a = MiniSegNet(rng_seed=0).train(samples, hyper)
        b = MiniSegNet(rng_seed=0).train(samples, hyper)
        np.testing.assert_array_equal(a.params, b.params)

    def test_rejects_unlabeled_samples(self):
        model = MiniSegNet(rng_seed=0)
        bare = _labeled_patch().without_mask()
        with pytest.raises(ValueError):
            model.train([bare], TrainHyper(learning_rate=1e-3, epochs=1))

    def test_warm_start_continues_from_current_params(self):
        model = MiniSegNet(rng_seed=0, dropout_rate=0.0)
        sample = _labeled_patch()
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=1))
        after_first = model.params.copy()
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=1))
        assert not np.array_equal(model.params, after_first)


class TestStochasticInference:
    def test_dropout_off_equals_deterministic_exactly(self):
        model = MiniSegNet(rng_seed=3, dropout_rate=0.0)
        sample = _labeled_patch(seed=5)
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=0))
        det = model.predict(sample)
        sto = model.predict_stochastic(sample, np.random.default_rng(0))
        assert np.array_equal(det.probs, sto.probs)

    def test_same_rng_state_reproduces(self):
        # An untrained head is all zeros and shadows the dropout mask, so
        # train briefly to make the bottleneck actually reach the output.
        model = MiniSegNet(rng_seed=3, dropout_rate=0.5)
        sample = _labeled_patch(seed=5)
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=0))
        a = model.predict_stochastic(sample, np.random.default_rng(11))
        b = model.predict_stochastic(sample, np.random.default_rng(11))
        assert np.array_equal(a.probs, b.probs)
        c = model.predict_stochastic(sample, np.random.default_rng(12))
        assert not np.array_equal(a.probs, c.probs)

    def test_chunking_does_not_leak_between_samples(self):
        """Each sample owns its rng, so a 40-wide batch (crossing the
        internal chunk size) matches 40 separate single calls."""
        model = MiniSegNet(rng_seed=3, dropout_rate=0.5)
        samples = [_labeled_patch(seed=i, pool_index=i) for i in range(40)]
        model.train(samples[:2], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=0))
        assert not np.all(model.predict(samples[0]).probs == 0.5)
        batch = model.predict_stochastic_batch(
            samples, [np.random.default_rng(1000 + i) for i in range(40)]
        )
        wrong_rng_diff = 0.0
        for i, (sample, pmap) in enumerate(zip(samples, batch)):
            single = model.predict_stochastic(sample, np.random.default_rng(1000 + i))
            np.testing.assert_allclose(pmap.probs, single.probs, atol=1e-6, rtol=0.0)
            other = model.predict_stochastic(sample, np.random.default_rng(2000 + i))
            wrong_rng_diff = max(wrong_rng_diff, np.abs(pmap.probs - other.probs).max())
        # A mismatched stream must be visibly different, or the tolerance
        # above would not be able to tell correct rng routing from broken.
        assert wrong_rng_diff > 1e-3

    def test_rng_count_must_match(self):
        model = MiniSegNet(rng_seed=3)
        with pytest.raises(ValueError):
            model.predict_stochastic_batch([_labeled_patch()], [])


class TestGradientCheck:
    def test_fresh_and_trained_models_pass(self):
        sample = _labeled_patch(seed=8)
        fresh = MiniSegNet(rng_seed=2)
        assert gradient_check(fresh, sample, rng_seed=0) < 1e-3
        trained = MiniSegNet(rng_seed=2, dropout_rate=0.0)
        trained.train([sample], TrainHyper(learning_rate=1e-3, epochs=10, rng_seed=0))
        assert gradient_check(trained, sample, rng_seed=0) < 1e-3

    def test_corrupted_entry_is_caught(self):
        """Negating the strongest-gradient entry must blow the error up; a
        checker that cannot see this would pass a broken backward pass."""
        sample = _labeled_patch(seed=8)
        model = MiniSegNet(rng_seed=2, dropout_rate=0.0)
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=5, rng_seed=0))
        target = int(np.argmax(np.abs(loss_gradient(model, sample))))
        assert gradient_check(model, sample, corrupt_index=target, rng_seed=0) > 1e-1

    def test_corrupt_index_must_be_in_range(self):
        model = MiniSegNet(rng_seed=0)
        with pytest.raises(ValueError):
            gradient_check(model, _labeled_patch(), corrupt_index=10**9)

    def test_needs_a_labeled_sample(self):
        model = MiniSegNet(rng_seed=0)
        with pytest.raises(ValueError):
            gradient_check(model, _labeled_patch().without_mask())


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        model = MiniSegNet(rng_seed=6, dropout_rate=0.0)
        sample = _labeled_patch(seed=1)
        model.train([sample], TrainHyper(learning_rate=1e-3, epochs=3, rng_seed=0))
        path = save_checkpoint(model, tmp_path / "model.bin")
        loaded = load_checkpoint(path, dropout_rate=0.0)
        assert loaded.base_width == model.base_width
        np.testing.assert_array_equal(loaded.params, model.params)
        np.testing.assert_array_equal(
            loaded.predict(sample).probs, model.predict(sample).probs
        )

    def test_header_layout(self, tmp_path):
        """Magic, then four little-endian uint32 fields, then float32 data."""
        model = MiniSegNet(base_width=2, rng_seed=0)
        raw = save_checkpoint(model, tmp_path / "m.bin").read_bytes()
        assert raw[:8] == b"ALSEG01\x00"
        width, in_ch, classes, count = struct.unpack("<4I", raw[8:24])
        assert (width, in_ch, classes) == (2, 1, 2)
        assert count == model.param_count
        assert len(raw) == 24 + 4 * count

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"PK\x03\x04 not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_truncated_file(self, tmp_path):
        model = MiniSegNet(base_width=2, rng_seed=0)
        path = save_checkpoint(model, tmp_path / "m.bin")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

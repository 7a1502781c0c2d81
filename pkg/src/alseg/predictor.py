"""A small encoder-decoder segmenter with a hand-written forward and
backward pass on plain numpy arrays.

Layout is NHWC throughout. Convolutions are evaluated as im2col matrix
products; the column matrices are cached on the forward pass and reused
for the weight gradients, and the input gradient of a same-padded
correlation is the same-padded correlation of the output gradient with the
spatially flipped, channel-transposed kernel, so no scatter-add is needed
anywhere.

All parameters live in one flat float32 buffer. Per-layer arrays are
reshaped views into that buffer, which lets the optimizer update the whole
model with a handful of vectorized statements and makes checkpointing a
single contiguous write. The same view construction over a float64 copy
drives the finite-difference gradient check at full double precision.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Embedding, EngineError, PatchSample, ProbabilityMap

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
_EVAL_CHUNK = 32

_CHECKPOINT_MAGIC = b"ALSEG01\x00"


class CheckpointError(EngineError, ValueError):
    """Raised when a checkpoint file is malformed or inconsistent."""


class PredictorContract(Protocol):
    """The capability set the experiment driver relies on."""

    def train(self, samples: Sequence[PatchSample], hyper: "TrainHyper") -> "PredictorContract": ...

    def predict(self, sample: PatchSample) -> ProbabilityMap: ...

    def predict_stochastic(self, sample: PatchSample, rng: np.random.Generator) -> ProbabilityMap: ...

    def embed(self, sample: PatchSample) -> Embedding: ...


@dataclass(frozen=True)
class TrainHyper:
    """One optimization run: Adam at learning_rate for epochs sweeps."""

    learning_rate: float
    epochs: int
    batch_size: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        # epochs=0 is a supported no-op so callers can skip phases cleanly.
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _layer_table(width: int) -> tuple[tuple[str, int, int, int], ...]:
    """(name, kernel, in_channels, out_channels) in parameter-buffer order."""
    w = width
    return (
        ("enc1a", 3, 1, w),
        ("enc1b", 3, w, w),
        ("enc2a", 3, w, 2 * w),
        ("enc2b", 3, 2 * w, 2 * w),
        ("bot_a", 3, 2 * w, 4 * w),
        ("bot_b", 3, 4 * w, 4 * w),
        ("dec2a", 3, 6 * w, 2 * w),
        ("dec2b", 3, 2 * w, 2 * w),
        ("dec1a", 3, 3 * w, w),
        ("dec1b", 3, w, w),
        ("head", 1, w, 2),
    )


def _make_views(flat: np.ndarray, table) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Slice the flat buffer into per-layer (weight, bias) views, no copies."""
    views: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    pos = 0
    for name, k, cin, cout in table:
        wsize = k * k * cin * cout
        weight = flat[pos : pos + wsize].reshape(k, k, cin, cout)
        pos += wsize
        bias = flat[pos : pos + cout]
        pos += cout
        views[name] = (weight, bias)
    if pos != flat.size:
        raise ValueError(f"parameter buffer has {flat.size} entries, layout needs {pos}")
    return views


def _conv_fwd(x, w, b, cache, name):
    """Same-padded correlation in NHWC via an im2col matrix product."""
    k, cout = w.shape[0], w.shape[3]
    bsz, h, ww = x.shape[:3]
    if k == 1:
        mat = x.reshape(bsz * h * ww, w.shape[2])
    else:
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        mat = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * ww, k * k * w.shape[2])
    y = (mat @ w.reshape(-1, cout) + b).reshape(bsz, h, ww, cout)
    if cache is not None:
        cache["cols/" + name] = mat
        cache["xshape/" + name] = x.shape
    return y


def _conv_bwd(dy, w, cache, name, gviews):
    """Fill this layer's gradient views and return the input gradient."""
    mat = cache["cols/" + name]
    x_shape = cache["xshape/" + name]
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3]
    dy_mat = dy.reshape(-1, cout)
    gw, gb = gviews[name]
    gw[...] = (mat.T @ dy_mat).reshape(gw.shape)
    gb[...] = dy_mat.sum(axis=0)
    if k == 1:
        return (dy_mat @ w.reshape(cin, cout).T).reshape(x_shape)
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
    return _conv_fwd(dy, flipped, np.zeros(cin, dtype=dy.dtype), None, "")


def _maxpool(x):
    """2x2 max-pool; ties resolve to the first cell so replay is exact."""
    bsz, h, w, c = x.shape
    r = (
        x.reshape(bsz, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(bsz, h // 2, w // 2, c, 4)
    )
    idx = r.argmax(axis=4)
    out = np.take_along_axis(r, idx[..., None], axis=4)[..., 0]
    return out, idx


def _maxpool_bwd(dy, idx, x_shape):
    bsz, h, w, c = x_shape
    r = np.zeros((bsz, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(r, idx[..., None], dy[..., None], axis=4)
    return (
        r.reshape(bsz, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(bsz, h, w, c)
    )


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_bwd(dy):
    bsz, h, w, c = dy.shape
    return dy.reshape(bsz, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _forward(views, x, dropout_mask=None, cache=None, until_bottleneck=False):
    def conv_relu(name, t):
        y = np.maximum(_conv_fwd(t, *views[name], cache, name), 0)
        if cache is not None:
            cache["act/" + name] = y
        return y

    e1 = conv_relu("enc1b", conv_relu("enc1a", x))
    p1, i1 = _maxpool(e1)
    e2 = conv_relu("enc2b", conv_relu("enc2a", p1))
    p2, i2 = _maxpool(e2)
    b1 = conv_relu("bot_a", p2)
    bd = b1 if dropout_mask is None else b1 * dropout_mask
    b2 = conv_relu("bot_b", bd)
    if until_bottleneck:
        return b2
    c2 = np.concatenate((_upsample(b2), e2), axis=3)
    d2 = conv_relu("dec2b", conv_relu("dec2a", c2))
    c1 = np.concatenate((_upsample(d2), e1), axis=3)
    d1 = conv_relu("dec1b", conv_relu("dec1a", c1))
    head_w, head_b = views["head"]
    logits = _conv_fwd(d1, head_w, head_b, cache, "head")
    if cache is not None:
        cache["pool1"] = (i1, e1.shape)
        cache["pool2"] = (i2, e2.shape)
        cache["dropout_mask"] = dropout_mask
    return logits


def _backward(views, gviews, dlogits, cache):
    def conv_bwd_relu(name, da):
        dz = da * (cache["act/" + name] > 0)
        return _conv_bwd(dz, views[name][0], cache, name, gviews)

    dd1 = _conv_bwd(dlogits, views["head"][0], cache, "head", gviews)
    dc1 = conv_bwd_relu("dec1a", conv_bwd_relu("dec1b", dd1))
    up1_ch = views["dec2b"][0].shape[3]
    dd2 = _upsample_bwd(dc1[..., :up1_ch])
    de1_skip = dc1[..., up1_ch:]
    dc2 = conv_bwd_relu("dec2a", conv_bwd_relu("dec2b", dd2))
    up2_ch = views["bot_b"][0].shape[3]
    db2 = _upsample_bwd(dc2[..., :up2_ch])
    de2_skip = dc2[..., up2_ch:]
    dbd = conv_bwd_relu("bot_b", db2)
    mask = cache["dropout_mask"]
    db1 = dbd if mask is None else dbd * mask
    dp2 = conv_bwd_relu("bot_a", db1)
    i2, e2_shape = cache["pool2"]
    de2 = _maxpool_bwd(dp2, i2, e2_shape) + de2_skip
    dp1 = conv_bwd_relu("enc2a", conv_bwd_relu("enc2b", de2))
    i1, e1_shape = cache["pool1"]
    de1 = _maxpool_bwd(dp1, i1, e1_shape) + de1_skip
    conv_bwd_relu("enc1a", conv_bwd_relu("enc1b", de1))


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _ce_loss_and_dlogits(logits: np.ndarray, y: np.ndarray):
    """Mean per-pixel cross-entropy in float64 plus d(loss)/d(logits)."""
    z = logits.astype(np.float64, copy=False)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sz = ez.sum(axis=-1)
    yi = y.astype(np.int64)[..., None]
    picked = np.take_along_axis(z, yi, axis=-1)[..., 0]
    loss = float(np.mean(zmax[..., 0] + np.log(sz) - picked))
    dl = ez / sz[..., None]
    np.put_along_axis(dl, yi, np.take_along_axis(dl, yi, axis=-1) - 1.0, axis=-1)
    dl /= float(y.size)
    # Confident pixels leave gradients that decay toward the float32
    # subnormal range, where hardware arithmetic slows by orders of
    # magnitude. Far below any useful signal, flush them to zero.
    dl[np.abs(dl) < 1e-30] = 0.0
    return loss, dl


def _check_hw(shape: tuple[int, int]) -> None:
    h, w = shape
    if h % 4 != 0 or w % 4 != 0:
        raise ValueError(f"patch sides must be multiples of 4 (two pooling levels), got {h}x{w}")


def _stack_pixels(samples: Sequence[PatchSample]) -> np.ndarray:
    if not samples:
        raise ValueError("no samples given")
    shape = samples[0].pixels.shape
    for s in samples:
        if s.pixels.shape != shape:
            raise ValueError(f"mixed patch shapes: {shape} vs {s.pixels.shape}")
    _check_hw(shape)
    return np.stack([s.pixels for s in samples]).astype(np.float32)[..., None]


class MiniSegNet:
    """Two-level U-shaped segmenter: widths (w, 2w, 4w), dropout in the
    bottleneck, nearest-neighbor upsampling with skip concatenation, and a
    1x1 two-class head. For the default width 8 that is 29,626 parameters.
    """

    num_classes = 2

    def __init__(self, base_width: int = 8, dropout_rate: float = 0.5, rng_seed: int = 0):
        if base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {base_width}")
        if not (0.0 <= dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.base_width = int(base_width)
        self.dropout_rate = float(dropout_rate)
        self._table = _layer_table(self.base_width)
        rng = np.random.default_rng(rng_seed)
        chunks = []
        for name, k, cin, cout in self._table:
            # He fan-in scaling for the ReLU stack. The head starts at exact
            # zero: a fresh model emits exactly uniform class probabilities,
            # and the first optimizer step breaks the symmetry through the
            # head gradient, which is nonzero whenever the input is.
            if name == "head":
                chunks.append(np.zeros(k * k * cin * cout))
            else:
                std = math.sqrt(2.0 / (k * k * cin))
                chunks.append(rng.normal(0.0, std, size=k * k * cin * cout))
            chunks.append(np.zeros(cout))
        self.params = np.concatenate(chunks).astype(np.float32)
        self._views = _make_views(self.params, self._table)
        self.epoch_losses: list[float] = []

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    @property
    def embedding_dim(self) -> int:
        return 4 * self.base_width

    def train(self, samples: Sequence[PatchSample], hyper: TrainHyper) -> "MiniSegNet":
        """Adam mini-batch training on labeled patches; mutates and returns self.

        Fresh optimizer moments per call: each call is one optimization run,
        whether from scratch or warm-starting finetune rounds. epoch_losses
        is replaced with this run's per-epoch mean loss trace.
        """
        if not samples:
            raise ValueError("no training samples")
        for s in samples:
            if s.mask is None:
                raise ValueError(f"sample with pool index {s.pool_index} has no mask")
        x = _stack_pixels(samples)
        y = np.stack([s.mask for s in samples])
        if hyper.epochs == 0:
            return self

        n = x.shape[0]
        rng = np.random.default_rng(hyper.rng_seed)
        # Moments live in float64: squared gradients underflow float32 into
        # subnormals long before they stop steering the update.
        moment1 = np.zeros(self.params.shape, dtype=np.float64)
        moment2 = np.zeros(self.params.shape, dtype=np.float64)
        gflat = np.zeros_like(self.params)
        gviews = _make_views(gflat, self._table)
        mask_shape = (x.shape[1] // 4, x.shape[2] // 4, 4 * self.base_width)
        step = 0
        self.epoch_losses = []
        for _ in range(hyper.epochs):
            perm = rng.permutation(n)
            loss_sum = 0.0
            for start in range(0, n, hyper.batch_size):
                idx = perm[start : start + hyper.batch_size]
                mask = None
                if self.dropout_rate > 0.0:
                    keep = rng.random((len(idx),) + mask_shape) >= self.dropout_rate
                    mask = keep.astype(np.float32) / np.float32(1.0 - self.dropout_rate)
                cache: dict = {}
                logits = _forward(self._views, x[idx], mask, cache)
                loss, dlogits = _ce_loss_and_dlogits(logits, y[idx])
                _backward(self._views, gviews, dlogits.astype(np.float32), cache)
                step += 1
                moment1 *= _ADAM_BETA1
                moment1 += (1.0 - _ADAM_BETA1) * gflat
                moment2 *= _ADAM_BETA2
                moment2 += (1.0 - _ADAM_BETA2) * gflat * gflat
                mhat = moment1 / (1.0 - _ADAM_BETA1**step)
                vhat = moment2 / (1.0 - _ADAM_BETA2**step)
                self.params -= hyper.learning_rate * mhat / (np.sqrt(vhat) + _ADAM_EPS)
                loss_sum += loss * len(idx)
            self.epoch_losses.append(loss_sum / n)
        return self

    def predict(self, sample: PatchSample) -> ProbabilityMap:
        return self.predict_batch([sample])[0]

    def predict_batch(self, samples: Sequence[PatchSample]) -> list[ProbabilityMap]:
        """Deterministic per-pixel class probabilities, dropout disabled."""
        out: list[ProbabilityMap] = []
        for start in range(0, len(samples), _EVAL_CHUNK):
            chunk = samples[start : start + _EVAL_CHUNK]
            x = _stack_pixels(chunk)
            probs = _softmax64(_forward(self._views, x)).astype(np.float32)
            out.extend(ProbabilityMap(probs[i]) for i in range(len(chunk)))
        return out

    def predict_stochastic(self, sample: PatchSample, rng: np.random.Generator) -> ProbabilityMap:
        return self.predict_stochastic_batch([sample], [rng])[0]

    def predict_stochastic_batch(
        self,
        samples: Sequence[PatchSample],
        rngs: Sequence[np.random.Generator],
    ) -> list[ProbabilityMap]:
        """One dropout-perturbed pass per sample, each mask from its own rng.

        Per-sample generators keep results independent of how callers chunk
        or parallelize the pool. With dropout_rate 0 no mask is drawn and the
        output equals predict_batch exactly.
        """
        if len(rngs) != len(samples):
            raise ValueError(f"{len(samples)} samples but {len(rngs)} rng streams")
        out: list[ProbabilityMap] = []
        for start in range(0, len(samples), _EVAL_CHUNK):
            chunk = samples[start : start + _EVAL_CHUNK]
            chunk_rngs = rngs[start : start + _EVAL_CHUNK]
            x = _stack_pixels(chunk)
            mask = None
            if self.dropout_rate > 0.0:
                shape = (x.shape[1] // 4, x.shape[2] // 4, 4 * self.base_width)
                keep = np.stack([r.random(shape) >= self.dropout_rate for r in chunk_rngs])
                mask = keep.astype(np.float32) / np.float32(1.0 - self.dropout_rate)
            probs = _softmax64(_forward(self._views, x, mask)).astype(np.float32)
            out.extend(ProbabilityMap(probs[i]) for i in range(len(chunk)))
        return out

    def embed(self, sample: PatchSample) -> Embedding:
        return self.embed_batch([sample])[0]

    def embed_batch(self, samples: Sequence[PatchSample]) -> list[Embedding]:
        """Global average pool of the bottleneck activation, dropout disabled."""
        out: list[Embedding] = []
        for start in range(0, len(samples), _EVAL_CHUNK):
            chunk = samples[start : start + _EVAL_CHUNK]
            x = _stack_pixels(chunk)
            bottleneck = _forward(self._views, x, until_bottleneck=True)
            vecs = bottleneck.mean(axis=(1, 2))
            out.extend(Embedding(vecs[i]) for i in range(len(chunk)))
        return out


def _loss_only(views, x, y) -> float:
    loss, _ = _ce_loss_and_dlogits(_forward(views, x), y)
    return loss


def loss_gradient(model: MiniSegNet, sample: PatchSample) -> np.ndarray:
    """Flat float64 analytic gradient of the loss on one labeled sample,
    dropout off. Lets callers pick meaningful targets for corruption probes.
    """
    if sample.mask is None:
        raise ValueError("loss gradient needs a labeled sample")
    _check_hw(sample.pixels.shape)
    flat64 = model.params.astype(np.float64)
    views = _make_views(flat64, model._table)
    x = sample.pixels[None, ..., None].astype(np.float64)
    y = sample.mask[None]
    gflat = np.zeros_like(flat64)
    gviews = _make_views(gflat, model._table)
    cache: dict = {}
    _, dlogits = _ce_loss_and_dlogits(_forward(views, x, None, cache), y)
    _backward(views, gviews, dlogits, cache)
    return gflat


def gradient_check(
    model: MiniSegNet,
    sample: PatchSample,
    corrupt_index: Optional[int] = None,
    rng_seed: int = 0,
    num_checks: int = 100,
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs entirely in float64 with dropout off. Differences below 1e-8 count
    as zero error so the check is meaningful near flat optima. Passing
    corrupt_index negates that one analytic gradient entry (and forces it
    into the checked set), which lets tests prove the check would actually
    catch a broken backward pass.
    """
    if sample.mask is None:
        raise ValueError("gradient check needs a labeled sample")
    _check_hw(sample.pixels.shape)
    flat64 = model.params.astype(np.float64)
    views = _make_views(flat64, model._table)
    x = sample.pixels[None, ..., None].astype(np.float64)
    y = sample.mask[None]

    gflat = np.zeros_like(flat64)
    gviews = _make_views(gflat, model._table)
    cache: dict = {}
    logits = _forward(views, x, None, cache)
    _, dlogits = _ce_loss_and_dlogits(logits, y)
    _backward(views, gviews, dlogits, cache)

    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(flat64.size, size=min(num_checks, flat64.size), replace=False)
    if corrupt_index is not None:
        if not 0 <= corrupt_index < flat64.size:
            raise ValueError(f"corrupt_index {corrupt_index} out of range")
        if corrupt_index not in chosen:
            chosen = chosen.copy()
            chosen[0] = corrupt_index
    worst = 0.0
    for i in chosen:
        orig = flat64[i]
        flat64[i] = orig + step
        loss_plus = _loss_only(views, x, y)
        flat64[i] = orig - step
        loss_minus = _loss_only(views, x, y)
        flat64[i] = orig
        fd = (loss_plus - loss_minus) / (2.0 * step)
        analytic = -gflat[i] if i == corrupt_index else gflat[i]
        diff = abs(analytic - fd)
        if diff > 1e-8:
            worst = max(worst, diff / max(abs(analytic), abs(fd)))
    return worst


def save_checkpoint(model: MiniSegNet, path: Union[str, Path]) -> Path:
    """Write the versioned binary checkpoint (layout in docs/checkpoint_format.md)."""
    path = Path(path)
    header = _CHECKPOINT_MAGIC + struct.pack(
        "<4I", model.base_width, 1, model.num_classes, model.param_count
    )
    path.write_bytes(header + model.params.astype("<f4", copy=False).tobytes())
    return path


def load_checkpoint(path: Union[str, Path], dropout_rate: float = 0.5) -> MiniSegNet:
    """Rebuild a model from a checkpoint; dropout_rate is a runtime knob, not stored."""
    path = Path(path)
    raw = path.read_bytes()
    head_len = len(_CHECKPOINT_MAGIC) + 16
    if len(raw) < head_len or raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a model checkpoint: {path}")
    base_width, in_ch, n_cls, count = struct.unpack("<4I", raw[len(_CHECKPOINT_MAGIC) : head_len])
    if in_ch != 1 or n_cls != 2:
        raise CheckpointError(f"unsupported channel layout ({in_ch} in, {n_cls} classes) in {path}")
    model = MiniSegNet(base_width=base_width, dropout_rate=dropout_rate, rng_seed=0)
    if count != model.param_count:
        raise CheckpointError(
            f"checkpoint declares {count} parameters, width {base_width} needs {model.param_count}"
        )
    if len(raw) != head_len + 4 * count:
        raise CheckpointError(f"checkpoint size mismatch in {path}")
    model.params[...] = np.frombuffer(raw, dtype="<f4", count=count, offset=head_len)
    return model

"""Volume storage, train/test splitting, patch extraction, and a synthetic
electron-microscopy-style dataset generator.

The generator draws elliptical organelles over a smooth bright background
in two appearance families. Solid dark blobs separate from the background
at a glance and are learned from a couple of examples. Ring blobs expose
a thin dark rim around a speckled interior shifted a little above or below
the local background; speckles read as foreground while the base between
them reads as background, so a model that has not learned to fill a given
ring variant outputs a patchwork of conflicting predictions there and its
own entropy flags the patch. No intensity threshold labels an interior
(the shift hides inside the range the background waves span), and the
spread of ring radii, rim depths, interior shifts, and speckle patterns
means a handful of examples never covers the family. The two row halves
mix the families differently: solids outnumber rings two to one in the
top-half cluster and rings outnumber solids two to one in the bottom-half
cluster, the way organelle composition drifts across a tissue section. A
model trained on whatever a small draw from one region happens to contain
stays wrong on the ring variants it has not met, which is what gives
uncertainty-driven selection something to buy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .core import EngineError, InvalidConfigError, PatchSample


class VolumeFormatError(EngineError, ValueError):
    """Raised when on-disk volume data is missing, truncated, or malformed."""


@dataclass(frozen=True, eq=False)
class Volume:
    """An immutable Z stack of grayscale slices with binary labels.

    intensity: float32 (Z, H, W) in [0, 1]
    labels:    uint8   (Z, H, W) in {0, 1}
    voxel_size_nm: physical voxel extent per axis, metadata only.
    """

    intensity: np.ndarray
    labels: np.ndarray
    voxel_size_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        intensity = np.array(self.intensity, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.uint8)
        if intensity.ndim != 3:
            raise ValueError(f"intensity must be 3-D (Z, H, W), got shape {intensity.shape}")
        if intensity.shape != labels.shape:
            raise ValueError(
                f"intensity shape {intensity.shape} != labels shape {labels.shape}"
            )
        if intensity.size == 0:
            raise ValueError("volume has no voxels")
        if not np.isfinite(intensity).all():
            raise ValueError("intensity contains non-finite values")
        if intensity.min() < 0.0 or intensity.max() > 1.0:
            raise ValueError("intensity values must lie in [0, 1]")
        bad = np.setdiff1d(np.unique(labels), [0, 1])
        if bad.size:
            raise ValueError(f"labels must be binary, found values {bad.tolist()}")
        intensity.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_size_nm", tuple(float(v) for v in self.voxel_size_nm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensity.shape

    def label_fraction(self) -> float:
        return float(self.labels.mean(dtype=np.float64))


@dataclass(frozen=True)
class SynthParams:
    """Geometry and texture knobs for the synthetic generator."""

    z: int = 8
    h: int = 256
    w: int = 256
    blob_count: int = 12
    blob_axes_range: tuple[float, float] = (12.0, 32.0)
    texture_period: float = 9.0
    noise_sigma: float = 0.07
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.z < 1 or self.h < 1 or self.w < 1:
            raise InvalidConfigError(f"volume shape must be positive, got {(self.z, self.h, self.w)}")
        if self.blob_count < 0:
            raise InvalidConfigError(f"blob_count must be >= 0, got {self.blob_count}")
        lo, hi = self.blob_axes_range
        if not (1.0 <= lo <= hi):
            raise InvalidConfigError(f"blob_axes_range must satisfy 1 <= min <= max, got {self.blob_axes_range}")
        # An ellipse fits once its bounding circle does; centers need slack on both sides.
        if self.blob_count > 0 and 2.0 * hi + 2.0 > min(self.h, self.w):
            raise InvalidConfigError(
                f"semi-axis {hi} cannot fit a blob inside a {self.h}x{self.w} slice"
            )
        if self.texture_period <= 0.0:
            raise InvalidConfigError(f"texture_period must be positive, got {self.texture_period}")
        if self.noise_sigma < 0.0:
            raise InvalidConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


# Appearance constants. Rim, solid, and speckle contrasts sit several
# noise widths off the background, so supervision is never contradictory
# and training stays stable. Ring interiors mix two deliberately opposed
# cues: dark speckle blocks that look like foreground next to a base level
# that looks like background (its shift off the local level, up or down
# per ring, hides inside the range the background waves span). Pointwise
# rules therefore cap out on rings: predicting rim plus speckles leaves
# most of a ring wrong, and only the enclosure rule, learned per variant
# from labeled rings, fills interiors. The conflicting cues keep a
# partially trained model visibly unsure on every ring variant it has not
# mastered. Ring axes are capped so the widest interior is still narrower
# than a training patch and every patch inside a ring contains rim
# evidence. Blobs gather in one cluster per row half, leaving most of a
# slice as featureless background, and the family mix differs by half:
# two rings to four solids in the top cluster, five rings to one solid
# in the bottom one. Easy solids are abundant where budgets are spent at
# random, hard rings are abundant where models are scored, so how a
# labeling budget is split between empty regions, solids, and the many
# ring variants is what distinguishes the query strategies.
_BG_LEVEL = 0.78
_BG_WAVE_AMPLITUDE = (0.03, 0.06)
_BG_WAVE_CYCLES = (0.5, 2.0)
_SOLID_DEPTH = (0.26, 0.40)
_SOLID_STRIPE_AMPLITUDE = 0.05
_RING_RIM_DEPTH = (0.26, 0.44)
_RING_INNER_FRAC = (0.70, 0.86)
_RING_CORE_OFFSET = (0.10, 0.16)
_RING_AXES_FRACTION = 0.3
_SPECKLE_DEPTH = (0.18, 0.30)
_SPECKLE_DENSITY = (0.20, 0.38)
_SPECKLE_SCALE = (3, 5)
_RIM_DROP = 0.15
_RIM_START = 0.75
_STRIPE_PERIOD_JITTER = (0.6, 1.6)
_CLUSTER_SPREAD = 30.0
_CLUSTER_PAD = 44.0


def generate_synthetic(params: SynthParams) -> Volume:
    """Render a seeded synthetic volume of dark solid and ring ellipses.

    Each slice gets blob_count oriented ellipses clustered in one spot per
    row half. Solid blobs are filled, striped at the configured period,
    and darkest at the rim. Ring blobs keep a thin dark rim band around an
    interior nudged above or below the background level and stippled with
    coarse dark speckle blocks. Families cycle within each half at
    different mixes, solid-heavy in the top half and ring-heavy in the
    bottom. Labels mark exact ellipse interiors. Gaussian noise is added
    last and the result is clipped to [0, 1].
    """
    rng = np.random.default_rng(params.rng_seed)
    z, h, w = params.z, params.h, params.w
    intensity = np.empty((z, h, w), dtype=np.float64)
    labels = np.zeros((z, h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    for zi in range(z):
        img = np.full((h, w), _BG_LEVEL, dtype=np.float64)
        for _ in range(2):
            amp = rng.uniform(*_BG_WAVE_AMPLITUDE)
            fy = rng.uniform(*_BG_WAVE_CYCLES) / h
            fx = rng.uniform(*_BG_WAVE_CYCLES) / w
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img += amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)

        # One cluster anchor per row half, so any horizontal split of the
        # volume keeps blob content on both sides and both sides see both
        # families, just at opposite mixes: the top cycle runs two rings
        # to four solids, the bottom cycle five rings to one solid.
        blobs = []
        half = h / 2.0
        for lo, hi, n_blobs, ring_cycle in (
            (0.0, half, params.blob_count - params.blob_count // 2,
             (True, False, False, True, False, False)),
            (half, float(h), params.blob_count // 2,
             (True, True, False, True, True, True)),
        ):
            pad_y = min(_CLUSTER_PAD, (hi - lo) / 2.0)
            pad_x = min(_CLUSTER_PAD, w / 2.0)
            ay = rng.uniform(lo + pad_y, hi - pad_y)
            ax = rng.uniform(pad_x, w - pad_x)
            blobs.extend((ay, ax, ring_cycle[i % 6]) for i in range(n_blobs))

        ax_lo, ax_hi = params.blob_axes_range
        ring_ax_hi = ax_lo + (ax_hi - ax_lo) * _RING_AXES_FRACTION
        for ay, ax, is_ring in blobs:
            top = ring_ax_hi if is_ring else ax_hi
            a = rng.uniform(ax_lo, top)
            b = rng.uniform(ax_lo, top)
            theta = rng.uniform(0.0, np.pi)
            margin = max(a, b) + 1.0
            cy = float(np.clip(ay + _CLUSTER_SPREAD * rng.normal(), margin, h - 1.0 - margin))
            cx = float(np.clip(ax + _CLUSTER_SPREAD * rng.normal(), margin, w - 1.0 - margin))

            # Work on the bounding box only; blobs cover a few percent of a slice.
            y0, y1 = max(int(cy - margin), 0), min(int(np.ceil(cy + margin)) + 1, h)
            x0, x1 = max(int(cx - margin), 0), min(int(np.ceil(cx + margin)) + 1, w)
            by = yy[y0:y1, x0:x1] - cy
            bx = xx[y0:y1, x0:x1] - cx
            ct, st = np.cos(theta), np.sin(theta)
            u = ct * bx + st * by
            v = -st * bx + ct * by
            r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
            inside = r <= 1.0

            patch = img[y0:y1, x0:x1]
            if is_ring:  # thin rim around a speckled, offset interior
                inner = rng.uniform(*_RING_INNER_FRAC)
                offset = rng.uniform(*_RING_CORE_OFFSET)
                if rng.random() < 0.5:
                    offset = -offset
                depth = rng.uniform(*_SPECKLE_DEPTH)
                density = rng.uniform(*_SPECKLE_DENSITY)
                scale = int(rng.integers(_SPECKLE_SCALE[0], _SPECKLE_SCALE[1] + 1))
                band = inside & (r >= inner)
                core = inside & (r < inner)
                patch[band] = (patch - rng.uniform(*_RING_RIM_DEPTH))[band]
                patch[core] = (patch + offset)[core]
                # Blocky speckle field: each scale-sized cell of the bounding
                # box is dark with probability `density`, independently per blob.
                cells = rng.random(((y1 - y0) // scale + 1, (x1 - x0) // scale + 1))
                gy, gx = np.mgrid[0 : y1 - y0, 0 : x1 - x0]
                speckled = core & (cells[gy // scale, gx // scale] < density)
                patch[speckled] = (patch - depth)[speckled]
            else:  # solid: filled, faint striping, darkest rim
                depth = rng.uniform(*_SOLID_DEPTH)
                stripe_phase = rng.uniform(0.0, 2.0 * np.pi)
                stripe_period = params.texture_period * rng.uniform(*_STRIPE_PERIOD_JITTER)
                rim = _RIM_DROP * np.clip((r - _RIM_START) / (1.0 - _RIM_START), 0.0, 1.0)
                stripes = _SOLID_STRIPE_AMPLITUDE * np.sin(
                    2.0 * np.pi * v / stripe_period + stripe_phase
                )
                stripes *= r <= _RIM_START
                patch[inside] = (patch - depth - rim + stripes)[inside]
            labels[zi, y0:y1, x0:x1][inside] = 1

        intensity[zi] = img

    if params.noise_sigma > 0.0:
        intensity += rng.normal(0.0, params.noise_sigma, size=intensity.shape)
    np.clip(intensity, 0.0, 1.0, out=intensity)
    return Volume(intensity.astype(np.float32), labels)


def split_train_test(volume: Volume) -> tuple[Volume, Volume]:
    """Split along the row axis: train gets rows [0, H//2), test the rest."""
    h = volume.shape[1]
    if h < 2:
        raise ValueError(f"need at least 2 rows to split, got {h}")
    mid = h // 2
    train = Volume(volume.intensity[:, :mid], volume.labels[:, :mid], volume.voxel_size_nm)
    test = Volume(volume.intensity[:, mid:], volume.labels[:, mid:], volume.voxel_size_nm)
    return train, test


def sample_patches(
    volume: Volume, count: int, patch_size: int, rng_seed: int
) -> list[PatchSample]:
    """Draw count square patches at uniform in-bounds positions, with masks.

    Positions may overlap; the pool is sampled with replacement over
    locations. pool_index runs 0..count-1 in draw order. Callers that feed
    an oracle should strip masks with PatchSample.without_mask() before
    exposing the pool to a learner.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    z, h, w = volume.shape
    if patch_size < 1 or patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} does not fit a {h}x{w} slice")
    rng = np.random.default_rng(rng_seed)
    zs = rng.integers(0, z, size=count)
    ys = rng.integers(0, h - patch_size + 1, size=count)
    xs = rng.integers(0, w - patch_size + 1, size=count)
    out = []
    for i in range(count):
        zi, yi, xi = int(zs[i]), int(ys[i]), int(xs[i])
        out.append(
            PatchSample(
                pixels=volume.intensity[zi, yi : yi + patch_size, xi : xi + patch_size].copy(),
                mask=volume.labels[zi, yi : yi + patch_size, xi : xi + patch_size].copy(),
                pool_index=i,
            )
        )
    return out


def _write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"missing slice file: {path}") from exc
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(raw):
            c = raw[pos : pos + 1]
            if c == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise VolumeFormatError(f"truncated PGM header in {path}")
        return raw[start:pos]

    if token() != b"P5":
        raise VolumeFormatError(f"not a binary PGM (P5) file: {path}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise VolumeFormatError(f"malformed PGM header in {path}") from exc
    if w < 1 or h < 1:
        raise VolumeFormatError(f"bad PGM dimensions {w}x{h} in {path}")
    if maxval != 255:
        raise VolumeFormatError(f"only 8-bit PGM supported, max value {maxval} in {path}")
    pos += 1  # single whitespace byte separates header from pixel data
    if len(raw) - pos < h * w:
        raise VolumeFormatError(f"truncated pixel data in {path}")
    return np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)


def _slice_name(zi: int) -> str:
    return f"img_{zi:04d}.pgm"


def save_volume(volume: Volume, out_dir: Union[str, Path]) -> Path:
    """Write one PGM per slice plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "intensity").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    z = volume.shape[0]
    for zi in range(z):
        gray = np.round(volume.intensity[zi].astype(np.float64) * 255.0).astype(np.uint8)
        _write_pgm(out / "intensity" / _slice_name(zi), gray)
        _write_pgm(out / "labels" / _slice_name(zi), volume.labels[zi] * np.uint8(255))
    manifest = {
        "intensity_dir": "intensity",
        "label_dir": "labels",
        "z": z,
        "h": volume.shape[1],
        "w": volume.shape[2],
        "voxel_size_nm": list(volume.voxel_size_nm),
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_volume(manifest_path: Union[str, Path]) -> Volume:
    """Load a volume from its JSON manifest and per-slice PGM files."""
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise VolumeFormatError(f"cannot read manifest: {path}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"manifest is not valid JSON: {path}") from exc
    if not isinstance(doc, dict):
        raise VolumeFormatError(f"manifest must be a JSON object: {path}")
    for key in ("intensity_dir", "label_dir", "z", "h", "w", "voxel_size_nm"):
        if key not in doc:
            raise VolumeFormatError(f"manifest {path} missing key {key!r}")
    z, h, w = int(doc["z"]), int(doc["h"]), int(doc["w"])
    if z < 1 or h < 1 or w < 1:
        raise VolumeFormatError(f"manifest {path} declares empty volume {z}x{h}x{w}")

    base = path.parent
    intensity_dir = base / str(doc["intensity_dir"])
    label_dir = base / str(doc["label_dir"])
    intensity = np.empty((z, h, w), dtype=np.float32)
    labels = np.empty((z, h, w), dtype=np.uint8)
    for zi in range(z):
        gray_path = intensity_dir / _slice_name(zi)
        gray = _read_pgm(gray_path)
        if gray.shape != (h, w):
            raise VolumeFormatError(
                f"slice shape {gray.shape} != declared {(h, w)} in {gray_path}"
            )
        intensity[zi] = gray.astype(np.float32) / 255.0

        mask_path = label_dir / _slice_name(zi)
        mask = _read_pgm(mask_path)
        if mask.shape != (h, w):
            raise VolumeFormatError(
                f"slice shape {mask.shape} != declared {(h, w)} in {mask_path}"
            )
        bad = np.setdiff1d(np.unique(mask), [0, 255])
        if bad.size:
            raise VolumeFormatError(
                f"non-binary label pixel values {bad.tolist()} in {mask_path}"
            )
        labels[zi] = mask // 255

    voxel = doc["voxel_size_nm"]
    if not (isinstance(voxel, list) and len(voxel) == 3):
        raise VolumeFormatError(f"voxel_size_nm must be a 3-element list in {path}")
    return Volume(intensity, labels, tuple(float(v) for v in voxel))

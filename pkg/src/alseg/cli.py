"""Command-line front end: dataset generation, single runs, and strategy
comparisons, all reproducible from the flags alone.

This module imports only the standard library at load time. The engine
(and with it numpy) is imported inside the command handlers, after main()
has pinned the BLAS thread environment, so run results cannot depend on
the host's default thread count. ALSEG_THREADS caps within-run math
parallelism; it defaults to 1, which is also the fastest setting for
matrices this small.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

_STRATEGY_NAMES = (
    "random",
    "max_entropy",
    "least_confidence",
    "bald",
    "kmeans",
    "coreset",
)

_PAPER_DEFAULTS = {"m": 20, "n": 2000, "k": 20, "iters": 25, "patch": 128}
_DESK_DEFAULTS = {"m": 10, "n": 400, "k": 5, "iters": 10, "patch": 32}

# Child-seed tags for dataset assembly (pool draw and test draw).
_STREAM_POOL_SAMPLES = 101
_STREAM_TEST_SAMPLES = 102


class _UsageError(Exception):
    """Bad flag values; maps to exit code 2."""


def _pin_threads() -> None:
    threads = os.environ.setdefault("ALSEG_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alseg",
        description="Active-learning benchmark engine for binary segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic volume")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--z", type=int, default=8)
    p_synth.add_argument("--h", type=int, default=256)
    p_synth.add_argument("--w", type=int, default=256)
    p_synth.add_argument("--blobs", type=int, default=12)
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.add_argument("--axes-min", type=float, default=12.0)
    p_synth.add_argument("--axes-max", type=float, default=32.0)
    p_synth.add_argument("--texture-period", type=float, default=9.0)
    p_synth.add_argument("--noise", type=float, default=0.07)
    p_synth.set_defaults(func=cmd_synth)

    def add_run_flags(p):
        p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
        p.add_argument("--m", type=int, default=None, help="initial labeled samples")
        p.add_argument("--n", type=int, default=None, help="pool size")
        p.add_argument("--k", type=int, default=None, help="queries per iteration")
        p.add_argument("--iters", type=int, default=None, help="query iterations")
        p.add_argument("--patch", type=int, default=None, help="patch side in pixels")
        p.add_argument("--mc-passes", type=int, default=16)
        p.add_argument("--test-count", type=int, default=None, help="test patches (default: n/4)")
        p.add_argument("--preset", choices=["desk"], default=None,
                       help="desk: the scaled-down protocol (m=10 n=400 k=5 iters=10 patch=32)")
        p.add_argument("--dropout-off", action="store_true",
                       help="disable dropout entirely (also during training)")

    p_run = sub.add_parser("run", help="run one (strategy, seed) experiment")
    add_run_flags(p_run)
    p_run.add_argument("--strategy", choices=_STRATEGY_NAMES, required=True)
    p_run.add_argument("--seed", type=int, default=1)
    p_run.add_argument("--out", default=None, help="output directory (default runs/<strategy>-seed<seed>)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run a strategies x seeds grid and summarize")
    add_run_flags(p_cmp)
    p_cmp.add_argument("--strategy", choices=_STRATEGY_NAMES, action="append", required=True,
                       help="repeatable; duplicates are dropped with a warning")
    p_cmp.add_argument("--seed", type=int, action="append", required=True, help="repeatable")
    p_cmp.add_argument("--out", required=True, help="output directory")
    p_cmp.add_argument("--parallel", type=int, default=1, metavar="W",
                       help="independent runs in flight (processes)")
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def _make_config(args, strategy: str, seed: int):
    from .core import ExperimentConfig, InvalidConfigError

    base = dict(_DESK_DEFAULTS if args.preset == "desk" else _PAPER_DEFAULTS)
    for flag, field in (("m", "m"), ("n", "n"), ("k", "k"), ("iters", "iters"), ("patch", "patch")):
        value = getattr(args, flag)
        if value is not None:
            base[field] = value
    try:
        return ExperimentConfig(
            m=base["m"],
            n=base["n"],
            k=base["k"],
            iterations=base["iters"],
            patch_size=base["patch"],
            mc_passes=args.mc_passes,
            seed=seed,
            strategy=strategy,
            dropout_rate=0.0 if args.dropout_off else 0.5,
        )
    except InvalidConfigError as exc:
        raise _UsageError(str(exc)) from exc


def _resolve_manifest(data: str) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.json"
    return path


def _volume_fingerprint(volume) -> str:
    digest = hashlib.sha256()
    digest.update(repr(volume.shape).encode())
    digest.update(volume.intensity.tobytes())
    digest.update(volume.labels.tobytes())
    return digest.hexdigest()


def _assemble_dataset(data: str, config, test_count):
    """Load the volume and build (oracle, pool, test_set, fingerprint, test_count).

    The pool and the test draw get their own child seeds of config.seed, so
    runs with equal seeds see identical data no matter the strategy.
    """
    from .data import load_volume, sample_patches, split_train_test
    from .oracle_loop import build_pool, derive_seed

    volume = load_volume(_resolve_manifest(data))
    fingerprint = _volume_fingerprint(volume)
    train_vol, test_vol = split_train_test(volume)
    if test_count is None:
        test_count = max(1, config.n // 4)
    pool_src = sample_patches(
        train_vol, config.n, config.patch_size, derive_seed(config.seed, _STREAM_POOL_SAMPLES)
    )
    test_set = sample_patches(
        test_vol, test_count, config.patch_size, derive_seed(config.seed, _STREAM_TEST_SAMPLES)
    )
    oracle, pool = build_pool(pool_src)
    return oracle, pool, test_set, fingerprint, test_count


def cmd_synth(args) -> int:
    if args.z < 1 or args.h < 1 or args.w < 1:
        raise _UsageError(f"volume shape must be positive, got {args.z}x{args.h}x{args.w}")
    from .core import InvalidConfigError
    from .data import SynthParams, generate_synthetic, save_volume

    try:
        params = SynthParams(
            z=args.z,
            h=args.h,
            w=args.w,
            blob_count=args.blobs,
            blob_axes_range=(args.axes_min, args.axes_max),
            texture_period=args.texture_period,
            noise_sigma=args.noise,
            rng_seed=args.seed,
        )
    except InvalidConfigError as exc:
        raise _UsageError(str(exc)) from exc
    volume = generate_synthetic(params)
    manifest = save_volume(volume, args.out)
    print(f"wrote {volume.shape[0]} slices to {manifest}")
    return 0


def _execute_run(data: str, config, test_count, out_dir: Path) -> Path:
    """Shared core of run and compare children: manifest first, then results."""
    from . import __version__
    from .metrics_report import write_curve_csv
    from .oracle_loop import run_experiment

    oracle, pool, test_set, fingerprint, test_count = _assemble_dataset(data, config, test_count)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "engine_version": __version__,
        "config": asdict(config),
        "dataset": {"manifest": str(_resolve_manifest(data)), "sha256": fingerprint},
        "sampling": {"test_count": test_count},
        "artifacts": {"curve": "curve.csv", "progress": "progress.jsonl"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(out_dir / "progress.jsonl", "w") as progress:
        curve = run_experiment(config, pool, test_set, oracle, progress=progress)
    curve_path = out_dir / "curve.csv"
    write_curve_csv(curve, str(curve_path))
    return curve_path


def cmd_run(args) -> int:
    config = _make_config(args, args.strategy, args.seed)
    out_dir = Path(args.out) if args.out else Path("runs") / f"{args.strategy}-seed{args.seed}"
    curve_path = _execute_run(args.data, config, args.test_count, out_dir)
    print(f"wrote {curve_path}")
    return 0


def _compare_child(payload: dict) -> dict:
    """Run one (strategy, seed) cell in a worker process."""
    _pin_threads()
    from .core import ExperimentConfig

    config = ExperimentConfig(**payload["config"])
    out_dir = Path(payload["out_dir"])
    try:
        curve_path = _execute_run(payload["data"], config, payload["test_count"], out_dir)
        return {"ok": True, "curve": str(curve_path)}
    except Exception as exc:  # noqa: BLE001 - report, parent decides
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def cmd_compare(args) -> int:
    strategies = []
    for s in args.strategy:
        if s in strategies:
            print(f"warning: duplicate strategy {s!r} ignored", file=sys.stderr)
        else:
            strategies.append(s)
    seeds = []
    for s in args.seed:
        if s in seeds:
            print(f"warning: duplicate seed {s} ignored", file=sys.stderr)
        else:
            seeds.append(s)
    if args.parallel < 1:
        raise _UsageError(f"--parallel must be >= 1, got {args.parallel}")

    from . import __version__
    from .metrics_report import aggregate_curves, export_csv, read_curve_csv

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for strategy in strategies:
        for seed in seeds:
            config = _make_config(args, strategy, seed)
            tasks.append(
                {
                    "config": asdict(config),
                    "data": args.data,
                    "test_count": args.test_count,
                    "out_dir": str(out_dir / "runs" / f"{strategy}-seed{seed}"),
                }
            )

    manifest = {
        "engine_version": __version__,
        "strategies": strategies,
        "seeds": seeds,
        "runs": [t["out_dir"] for t in tasks],
        "config_template": tasks[0]["config"],
        "artifacts": {"curves": "curve.csv", "summary": "summary.csv"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    # Results are collected in submission order, so worker count cannot
    # change any output byte.
    results: list[dict] = []
    if args.parallel == 1:
        results = [_compare_child(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_compare_child, tasks))

    failures = []
    curves = []
    for task, result in zip(tasks, results):
        if result["ok"]:
            curves.extend(read_curve_csv(result["curve"]))
        else:
            failures.append(f"{task['out_dir']}: {result['error']}")

    if curves:
        bundle = aggregate_curves(curves)
        export_csv(bundle, str(out_dir / "curve.csv"), str(out_dir / "summary.csv"))
        print(f"wrote {out_dir / 'curve.csv'} and {out_dir / 'summary.csv'}")
    if failures:
        print(f"{len(failures)} of {len(tasks)} runs failed:", file=sys.stderr)
        for line in failures:
            print(f"  {line}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    _pin_threads()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - one honest line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

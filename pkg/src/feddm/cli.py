"""Command-line harness: run experiment grids, report results, verify properties.

Subcommands: run, report, verify, partition, sample.  Exit codes: 0 success,
1 configuration error, 2 runtime error, 3 verification failure.  The FEDDM_LOG
environment variable (error, info, debug) controls logging verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import AppConfig, GridEntry, grid_combos, load_config
from .data import (
    circle_centers,
    make_gaussian_mixture,
    partition_assignment,
    save_assignment_csv,
)
from .denoiser import MlpDenoiser, load_params, noise_predictor, save_params
from .diffusion import build_linear_schedule, sample
from .errors import ConfigError
from .federation import run_experiment, write_metrics_csv
from .report import write_report
from .rng import derive_seed
from .verify import run_all

log = logging.getLogger("feddm")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce one run directory."""

    name: str
    master_seed: int
    artifact_version: str
    created_utc: str
    finished_utc: str
    config: dict
    outputs: dict
    totals: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _setup_logging() -> None:
    level_name = os.environ.get("FEDDM_LOG", "info").lower()
    if level_name not in _LOG_LEVELS:
        print(
            f"warning: FEDDM_LOG must be one of {sorted(_LOG_LEVELS)}, "
            f"got {level_name!r}; using info",
            file=sys.stderr,
        )
        level_name = "info"
    logging.basicConfig(level=_LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s")


def _build_dataset(app: AppConfig, master_seed: int):
    centers = circle_centers(app.data.components, app.data.radius)
    return make_gaussian_mixture(
        app.data.n, centers, app.data.std, derive_seed(master_seed, "data")
    )


def _build_arch(app: AppConfig) -> MlpDenoiser:
    return MlpDenoiser.for_data(
        2, app.model.hidden, app.model.activation, app.model.time_features
    )


def _config_snapshot(app: AppConfig, entry: GridEntry) -> dict:
    return {
        "federated": dataclasses.asdict(entry.federated),
        "diffusion": dataclasses.asdict(app.diffusion),
        "partition": dataclasses.asdict(entry.partition),
        "data": dataclasses.asdict(app.data),
        "model": dataclasses.asdict(app.model),
    }


def _execute_entry(app: AppConfig, entry: GridEntry, run_dir: Path) -> None:
    """One grid entry: train, then persist manifest, metrics, checkpoint, samples."""
    created = _now()
    run_dir.mkdir(parents=True, exist_ok=True)
    fed = entry.federated
    data = _build_dataset(app, fed.seed)
    arch = _build_arch(app)
    log.info("run %s: starting (%d rounds)", run_dir.name, fed.rounds)
    result = run_experiment(fed, data, entry.partition, arch, app.diffusion)

    write_metrics_csv(result, run_dir / "metrics.csv")
    save_params(run_dir / "checkpoint.bin", result.final_params)
    sched = build_linear_schedule(app.diffusion)
    generated = sample(
        noise_predictor(arch, result.final_params, sched),
        sched,
        fed.eval_samples,
        arch.data_dim,
        derive_seed(fed.seed, "final-samples"),
    )
    _write_samples_csv(run_dir / "samples.csv", generated)
    if result.calibration:
        (run_dir / "calibration.json").write_text(
            json.dumps(result.calibration, indent=2)
        )
    manifest = RunManifest(
        name=run_dir.name,
        master_seed=fed.seed,
        artifact_version=__version__,
        created_utc=created,
        finished_utc=_now(),
        config=_config_snapshot(app, entry),
        outputs={
            "metrics": "metrics.csv",
            "checkpoint": "checkpoint.bin",
            "samples": "samples.csv",
        },
        totals={
            "bytes": result.total_bytes,
            "code_bytes": result.total_code_bytes,
            "best_fid": result.best_fid,
        },
    )
    (run_dir / "manifest.json").write_text(manifest.to_json())
    log.info("run %s: best fid %.6f", run_dir.name, result.best_fid)


def _write_samples_csv(path: Path, points: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(",".join(f"x{i + 1}" for i in range(points.shape[1])) + "\n")
        for row in points:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def _entry_worker(args: tuple) -> None:
    app, entry, run_dir = args
    _execute_entry(app, entry, Path(run_dir))


def cmd_run(config_path: str, out_dir: str, seed: int | None = None, jobs: int = 1) -> int:
    """Run every grid entry into its own self-describing subdirectory."""
    app = load_config(config_path)
    if seed is not None:
        fed = dataclasses.replace(app.federated, seed=seed)
        pspec = dataclasses.replace(
            app.partition, seed=derive_seed(seed, "partition")
        )
        app = dataclasses.replace(app, federated=fed, partition=pspec)
    entries = grid_combos(app)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [
        (app, entry, out / f"run_{i:03d}_{entry.name}")
        for i, entry in enumerate(entries)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_entry_worker, tasks))
    else:
        for task in tasks:
            _entry_worker(task)
    log.info("completed %d run(s) under %s", len(tasks), out)
    return EXIT_OK


def cmd_report(runs_dir: str) -> int:
    """Summarize completed runs into report.md plus one FID chart per run."""
    report_path = write_report(runs_dir)
    print(report_path.read_text())
    log.info("report written to %s", report_path)
    return EXIT_OK


def cmd_verify(out_dir: str | None = None) -> int:
    """Run every property family, print one pass/fail line each."""
    start = time.perf_counter()
    results = run_all()
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} ({result.seconds:.1f}s): {result.detail}")
    elapsed = time.perf_counter() - start
    if elapsed > 300:
        print(f"warning: verification took {elapsed:.0f}s (budget 300s)", file=sys.stderr)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_report.json").write_text(
            json.dumps([dataclasses.asdict(r) for r in results], indent=2)
        )
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_partition(config_path: str, out_dir: str) -> int:
    """Emit the shard-assignment CSV for the configured dataset and partitioning."""
    app = load_config(config_path)
    data = _build_dataset(app, app.federated.seed)
    assignment = partition_assignment(data, app.partition)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_assignment_csv(out / "shards.csv", assignment)
    log.info("shard assignment written to %s", out / "shards.csv")
    return EXIT_OK


def cmd_sample(
    config_path: str,
    checkpoint_path: str,
    out_dir: str,
    count: int,
    seed: int | None = None,
) -> int:
    """Load a checkpoint and emit a CSV of generated points."""
    app = load_config(config_path)
    theta = load_params(checkpoint_path)
    arch = _build_arch(app)
    if theta.layout != arch.layout():
        raise ConfigError(
            "checkpoint layout does not match the configured architecture"
        )
    sched = build_linear_schedule(app.diffusion)
    use_seed = app.federated.seed if seed is None else seed
    points = sample(
        noise_predictor(arch, theta, sched),
        sched,
        count,
        arch.data_dim,
        derive_seed(use_seed, "cli-sample"),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_samples_csv(out / "samples.csv", points)
    log.info("%d samples written to %s", count, out / "samples.csv")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddm",
        description="Desk-scale federated training simulator for denoising diffusion models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute the configured experiment grid")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    run_p.add_argument("--jobs", type=int, default=1, help="max concurrent grid entries")

    report_p = sub.add_parser("report", help="summarize completed runs")
    report_p.add_argument("--out", required=True, help="directory holding run subdirectories")

    verify_p = sub.add_parser("verify", help="run the property suite")
    verify_p.add_argument("--out", default=None, help="optional directory for the JSON report")

    part_p = sub.add_parser("partition", help="emit the shard-assignment CSV only")
    part_p.add_argument("--config", required=True)
    part_p.add_argument("--out", required=True)

    sample_p = sub.add_parser("sample", help="load a checkpoint and emit samples")
    sample_p.add_argument("--config", required=True)
    sample_p.add_argument("--checkpoint", required=True)
    sample_p.add_argument("--out", required=True)
    sample_p.add_argument("--count", type=int, default=1024)
    sample_p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.jobs)
        if args.command == "report":
            return cmd_report(args.out)
        if args.command == "verify":
            return cmd_verify(args.out)
        if args.command == "partition":
            return cmd_partition(args.config, args.out)
        if args.command == "sample":
            return cmd_sample(args.config, args.checkpoint, args.out, args.count, args.seed)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps everything to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

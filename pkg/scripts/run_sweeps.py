#!/usr/bin/env python3
"""Drive the bundled sweep configs end to end and build one report per sweep.

    python3 scripts/run_sweeps.py --out results [--jobs 4] [--sweep client_sweep]

Each sweep lands in <out>/<name>/ with per-run directories plus report.md and
FID charts.  Expect roughly 10-20 minutes for the full set on 4 cores.
"""

import argparse
import sys
from pathlib import Path

from feddm.cli import cmd_report, cmd_run

SWEEPS = ("client_sweep", "skew_sweep", "quant_vs_vanilla")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--sweep", choices=SWEEPS, default=None, help="run one sweep only")
    args = parser.parse_args()

    config_dir = Path(__file__).resolve().parent.parent / "configs"
    names = [args.sweep] if args.sweep else list(SWEEPS)
    for name in names:
        out_dir = Path(args.out) / name
        print(f"== {name} -> {out_dir}")
        status = cmd_run(str(config_dir / f"{name}.cfg"), str(out_dir), jobs=args.jobs)
        if status != 0:
            return status
        cmd_report(str(out_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())

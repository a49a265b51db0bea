"""Summary tables and static SVG charts over completed run directories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .federation import read_metrics_csv

MIB = 2**20

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 60, 20, 40, 50


@dataclass(frozen=True)
class RunSummary:
    """One row of the report table."""

    name: str
    variant: str
    clients: int
    contributing: int
    rounds: int
    local_epochs: int
    bitwidth: int
    partition_mode: str
    skew_level: int
    best_fid: float
    mib_transferred: float
    code_mib_transferred: float
    fid_trace: list[tuple[int, float]]


def scan_runs(runs_dir: str | Path) -> list[RunSummary]:
    """Collect summaries from every subdirectory holding a manifest."""
    runs_dir = Path(runs_dir)
    summaries: list[RunSummary] = []
    if not runs_dir.is_dir():
        raise RuntimeError(f"not a directory: {runs_dir}")
    for manifest_path in sorted(runs_dir.glob("*/manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        run_dir = manifest_path.parent
        rows = read_metrics_csv(run_dir / manifest["outputs"]["metrics"])
        fid_trace = [(r["round"], r["fid"]) for r in rows if r["fid"] is not None]
        total_bytes = sum(
            (r["bytes_up"] or 0) + (r["bytes_down"] or 0) for r in rows
        )
        fed = manifest["config"]["federated"]
        part = manifest["config"]["partition"]
        summaries.append(
            RunSummary(
                name=run_dir.name,
                variant=fed["variant"],
                clients=fed["clients"],
                contributing=fed["contributing"],
                rounds=fed["rounds"],
                local_epochs=fed["local_epochs"],
                bitwidth=fed["bitwidth"],
                partition_mode=part["mode"],
                skew_level=part["skew_level"],
                best_fid=min(f for _, f in fid_trace),
                mib_transferred=total_bytes / MIB,
                code_mib_transferred=manifest["totals"]["code_bytes"] / MIB,
                fid_trace=fid_trace,
            )
        )
    if not summaries:
        raise RuntimeError(f"no completed runs found under {runs_dir}")
    return summaries


def summary_table(summaries: list[RunSummary]) -> str:
    """Markdown table: one row per run, grouped by name order."""
    header = (
        "| run | variant | K | k | R | E | b | partition | best FID | MiB | code MiB |\n"
        "|---|---|---|---|---|---|---|---|---|---|---|\n"
    )
    rows = []
    for s in summaries:
        part = s.partition_mode if s.partition_mode != "skew" else f"skew{s.skew_level}"
        rows.append(
            f"| {s.name} | {s.variant} | {s.clients} | {s.contributing} | {s.rounds} "
            f"| {s.local_epochs} | {s.bitwidth} | {part} | {s.best_fid:.6f} "
            f"| {s.mib_transferred:.6f} | {s.code_mib_transferred:.6f} |"
        )
    return header + "\n".join(rows) + "\n"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def line_chart_svg(
    points: list[tuple[float, float]], title: str, xlabel: str, ylabel: str
) -> str:
    """A single static polyline chart with axes and tick labels."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _HEIGHT - _MARGIN_B - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{_MARGIN_L}" y1="{_HEIGHT - _MARGIN_B}" x2="{_WIDTH - _MARGIN_R}" '
        f'y2="{_HEIGHT - _MARGIN_B}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_HEIGHT - _MARGIN_B}" stroke="black"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        x = sx(tick)
        parts.append(
            f'<line x1="{x:.1f}" y1="{_HEIGHT - _MARGIN_B}" x2="{x:.1f}" '
            f'y2="{_HEIGHT - _MARGIN_B + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{_HEIGHT - _MARGIN_B + 20}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{tick:.3g}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        y = sy(tick)
        parts.append(
            f'<line x1="{_MARGIN_L - 5}" y1="{y:.1f}" x2="{_MARGIN_L}" '
            f'y2="{y:.1f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_MARGIN_L - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{tick:.3g}</text>'
        )
    parts.append(
        f'<text x="{_WIDTH / 2}" y="{_HEIGHT - 10}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{_HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {_HEIGHT / 2})">{ylabel}</text>'
    )
    path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
    parts.append(
        f'<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="2"/>'
    )
    for x, y in points:
        parts.append(
            f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="#1f77b4"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(runs_dir: str | Path, out_dir: str | Path | None = None) -> Path:
    """Emit report.md plus one FID-vs-round SVG per run; returns the report path."""
    runs_dir = Path(runs_dir)
    out_dir = runs_dir if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = scan_runs(runs_dir)
    report_path = out_dir / "report.md"
    report_path.write_text("# Run summary\n\n" + summary_table(summaries))
    for s in summaries:
        svg = line_chart_svg(
            [(float(r), f) for r, f in s.fid_trace],
            title=f"{s.name}",
            xlabel="round",
            ylabel="Frechet distance",
        )
        (out_dir / f"{s.name}_fid.svg").write_text(svg)
    return report_path

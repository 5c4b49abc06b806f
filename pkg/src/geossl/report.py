"""Aggregate metrics CSVs into standalone SVG line charts and a text table."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .harness import CSV_COLUMNS

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(ValueError):
    pass


@dataclass
class Series:
    label: str
    x: list[str] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)
    n: list[int] = field(default_factory=list)


def read_rows(path) -> list[dict]:
    """Parse a metrics CSV, failing with row/column diagnostics."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ReportError(f"{path}: empty CSV")
        if header != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            raise ReportError(f"{path}: unexpected header (missing columns: {missing or 'none'}, "
                              f"order must be {','.join(CSV_COLUMNS)})")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ReportError(f"{path}: row {lineno} has {len(rec)} columns, expected {len(header)}")
            rows.append(dict(zip(header, rec)))
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def _num(row: dict, col: str, where: str) -> float:
    v = row[col]
    if v == "":
        return math.nan
    try:
        return float(v)
    except ValueError:
        raise ReportError(f"{where}: column {col} is not numeric ({v!r})") from None


def _order(labels: list[str]) -> list[str]:
    try:
        return sorted(labels, key=float)
    except ValueError:
        return labels


def build_series(rows: list[dict], source: str = "") -> tuple[str, str, list[Series]]:
    """Group per-seed final rows into series (one per ssl/geo/alpha/d_max combination).

    Returns (axis, metric, series). A CSV with only a single run's epoch rows
    becomes a loss-per-epoch chart.
    """
    finals = [r for r in rows if r["epoch"] == "final" and r["seed"] != "mean±std"]
    axes = {r["axis"] for r in finals}
    if len(axes) > 1:
        raise ReportError(f"{source}: mixed axes {sorted(axes)} in one CSV")
    axis = axes.pop() if axes else rows[0]["axis"]
    groups: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))

    if axis == "none" or not finals:
        metric = "loss_total"
        epochs = [r for r in rows if r["epoch"] not in ("final", "")]
        if not epochs:
            raise ReportError(f"{source}: no epoch rows to plot")
        for i, r in enumerate(epochs):
            key = f"{r['geo_kind']} a={r['alpha']}"
            groups[key][r["epoch"]].append(_num(r, metric, f"{source} row {i + 2}"))
        x_name = "epoch"
    else:
        metric = "knn_acc_macro"
        for i, r in enumerate(finals):
            key = f"{r['ssl_kind']}/{r['geo_kind']}"
            if axis != "alpha_dmax":
                key += f" a={r['alpha']} d={r['d_max']}"
            groups[key][r["grid_point"]].append(_num(r, metric, f"{source} row {i + 2}"))
        x_name = axis
    series = []
    for label, pts in groups.items():
        s = Series(label)
        for x in _order(list(pts)):
            vals = np.asarray(pts[x], dtype=float)
            vals = vals[np.isfinite(vals)]
            s.x.append(x)
            s.mean.append(float(vals.mean()) if len(vals) else math.nan)
            s.std.append(float(vals.std()) if len(vals) else math.nan)
            s.n.append(len(vals))
        series.append(s)
    return x_name, metric, series


def render_svg(title: str, x_name: str, metric: str, series: list[Series],
               width: int = 640, height: int = 400) -> str:
    """Line chart with mean markers and ±std error bars; categorical x axis."""
    left, right, top, bottom = 70, 20, 40, 60
    xs = []
    for s in series:
        for x in s.x:
            if x not in xs:
                xs.append(x)
    xs = _order(xs)
    lo = min((m - sd for s in series for m, sd in zip(s.mean, s.std) if math.isfinite(m)), default=0.0)
    hi = max((m + sd for s in series for m, sd in zip(s.mean, s.std) if math.isfinite(m)), default=1.0)
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        i = xs.index(x)
        return left + (pw * (i + 0.5) / len(xs))

    def py(v):
        return top + ph * (1.0 - (v - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        out.append(f'<line x1="{left - 4}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.2f}" text-anchor="end">{v:.4g}</text>')
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{top + ph + 16}" text-anchor="middle">{escape(x)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 18}" text-anchor="middle">{escape(x_name)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(metric)}</text>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(px(x), py(m)) for x, m in zip(s.x, s.mean) if math.isfinite(m)]
        if len(pts) > 1:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline class="series" points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, m, sd in zip(s.x, s.mean, s.std):
            if not math.isfinite(m):
                continue
            cx = px(x)
            if sd > 0:
                out.append(f'<line class="errorbar" x1="{cx:.2f}" y1="{py(m - sd):.2f}" x2="{cx:.2f}" '
                           f'y2="{py(m + sd):.2f}" stroke="{color}"/>')
            out.append(f'<circle class="point" cx="{cx:.2f}" cy="{py(m):.2f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" text-anchor="end" '
                   f'fill="{color}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def summary_table(charts: list[tuple[str, str, str, list[Series]]]) -> str:
    lines = []
    for source, x_name, metric, series in charts:
        lines.append(f"{source}  [{x_name} vs {metric}]")
        lines.append(f"  {'series':<36} {x_name:>14} {'mean':>10} {'std':>10} {'n':>3}")
        for s in series:
            for x, m, sd, n in zip(s.x, s.mean, s.std, s.n):
                lines.append(f"  {s.label:<36} {x:>14} {m:>10.4f} {sd:>10.4f} {n:>3}")
        lines.append("")
    return "\n".join(lines)


def make_report(csv_paths, out_dir) -> list[Path]:
    """Validate every CSV first, then write one SVG per CSV plus summary.txt."""
    charts = []
    for p in csv_paths:
        rows = read_rows(p)
        x_name, metric, series = build_series(rows, str(p))
        charts.append((str(p), x_name, metric, series))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (source, x_name, metric, series) in charts:
        target = out_dir / (Path(source).stem + ".svg")
        target.write_text(render_svg(f"{Path(source).stem}: {metric} by {x_name}", x_name, metric, series))
        written.append(target)
    summary = out_dir / "summary.txt"
    summary.write_text(summary_table(charts))
    written.append(summary)
    return written

"""Summaries over evaluation CSVs and a minimal SVG line-chart writer."""
from __future__ import annotations

import csv
from html import escape
from pathlib import Path
from typing import Dict, Sequence, Tuple

from .attacks import aggregate, read_eval_csv

Series = Dict[str, Sequence[Tuple[float, float]]]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def summarize(paths: Sequence) -> list:
    """One aggregated row per (source, attack, region, epsilon).

    ``source`` is the parent directory name of each CSV.  The result depends
    only on file contents and the given path order.
    """
    rows = []
    for p in paths:
        p = Path(p)
        for agg in aggregate(read_eval_csv(p)):
            rows.append({"source": p.parent.name or p.stem, **agg})
    return rows


def write_summary(rows, path):
    header = ["source", "attack", "region", "epsilon", "mean", "std", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def format_table(rows, columns: Sequence[str]) -> str:
    """Fixed-width plain-text table."""
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    out = [line(columns), line(["-" * w for w in widths])]
    out += [line(b) for b in body]
    return "\n".join(out) + "\n"


def accuracy_series(rows) -> Series:
    series = {}
    for r in rows:
        key = f"{r['source']}:{r['attack']}/{r['region']}"
        series.setdefault(key, []).append((float(r["epsilon"]), float(r["mean"])))
    return {k: sorted(v) for k, v in series.items()}


def line_chart_svg(series: Series, title: str = "", xlabel: str = "epsilon",
                   ylabel: str = "accuracy", width: int = 480, height: int = 320) -> str:
    ml, mr, mt, mb = 56, 16, 28, 44
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = 0.0, 1.0
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for i in range(5):
        yv = y0 + i * (y1 - y0) / 4
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
        xv = x0 + i * (x1 - x0) / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = mt + 14 * i + 6
        out.append(f'<text x="{ml + pw - 4}" y="{ly}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

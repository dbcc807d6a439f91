"""Minimal, byte-deterministic SVG line plots (no plotting library involved)."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .tables import ResultTable, atomic_write

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f")
W, H = 640, 420
ML, MR, MT, MB = 70, 170, 30, 50


@dataclass
class AxesSpec:
    x: str
    y: str
    series: str | tuple | None = None  # column(s) whose values split the rows into polylines
    xlog: bool = False
    ylog: bool = False
    title: str = ""


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float, log: bool) -> str:
    return f"1e{v:g}" if log else f"{v:.3g}"


def _series_key(row, series):
    if series is None:
        return ""
    if isinstance(series, str):
        series = (series,)
    return " ".join(f"{row[c]}" for c in series)


def render_svg(table: ResultTable, axes: AxesSpec) -> str:
    groups: dict[str, list] = {}
    for r in table.rows:
        x, y = float(r[axes.x]), float(r[axes.y])
        for v, log, name in ((x, axes.xlog, axes.x), (y, axes.ylog, axes.y)):
            if not math.isfinite(v):
                raise ValueError(f"non-finite value in column {name}")
            if log and v <= 0:
                raise ValueError(f"log axis on {name} needs positive values, got {v}")
        groups.setdefault(_series_key(r, axes.series), []).append((x, y))
    if not groups:
        raise ValueError("nothing to plot")
    tx = (lambda v: math.log10(v)) if axes.xlog else (lambda v: v)
    ty = (lambda v: math.log10(v)) if axes.ylog else (lambda v: v)
    pts = [(tx(x), ty(y)) for g in groups.values() for x, y in g]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = W - ML - MR, H - MT - MB

    def px(v):
        return ML + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MT + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if axes.title:
        out.append(f'<text x="{ML}" y="{MT - 10}" font-size="14">{axes.title}</text>')
    for i in range(5):
        vx = x0 + (x1 - x0) * i / 4
        vy = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_num(px(vx))}" y="{H - MB + 18}" font-size="11" text-anchor="middle">{_tick_label(vx, axes.xlog)}</text>')
        out.append(f'<text x="{ML - 6}" y="{_num(py(vy) + 4)}" font-size="11" text-anchor="end">{_tick_label(vy, axes.ylog)}</text>')
    out.append(f'<text x="{ML + pw / 2:.2f}" y="{H - 10}" font-size="12" text-anchor="middle">{axes.x}</text>')
    out.append(f'<text x="16" y="{MT + ph / 2:.2f}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {MT + ph / 2:.2f})">{axes.y}</text>')
    for k, (name, g) in enumerate(groups.items()):
        color = PALETTE[k % len(PALETTE)]
        g = sorted(g)
        coords = " ".join(f"{_num(px(tx(x)))},{_num(py(ty(y)))}" for x, y in g)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = MT + 14 + 16 * k
        out.append(f'<line x1="{W - MR + 10}" y1="{ly - 4}" x2="{W - MR + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR + 35}" y="{ly}" font-size="11">{name or axes.y}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_plot(table: ResultTable, axes: AxesSpec, path) -> None:
    atomic_write(path, render_svg(table, axes))

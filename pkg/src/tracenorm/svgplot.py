"""Minimal static SVG line and scatter plots (log axes, dotted reference lines)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    dotted: bool = False
    color: str | None = None
    markers: bool = False


@dataclass
class Plot:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    xlog: bool = False
    ylog: bool = False
    width: int = 640
    height: int = 420
    series: list = field(default_factory=list)
    vlines: list = field(default_factory=list)
    hlines: list = field(default_factory=list)


def _ticks(lo, hi, log):
    if log:
        a, b = int(np.floor(lo)), int(np.ceil(hi))
        return [float(t) for t in range(a, b + 1) if lo - 1e-9 <= t <= hi + 1e-9]
    span = hi - lo
    step = 10 ** np.floor(np.log10(span / 5)) if span > 0 else 1.0
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= 6:
            step *= mult
            break
    start = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(start, hi + step * 1e-9, step)]


def _label(t, log):
    if log:
        return f"1e{int(t)}"
    return f"{t:g}"


def render(plot: Plot) -> str:
    ml, mr, mt, mb = 70, 20, 40, 55
    W, H = plot.width, plot.height
    pw, ph = W - ml - mr, H - mt - mb

    def tx(v, log):
        v = np.asarray(v, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log10(v) if log else v

    xs, ys = [], []
    for s in plot.series:
        x, y = tx(s.x, plot.xlog), tx(s.y, plot.ylog)
        ok = np.isfinite(x) & np.isfinite(y)
        xs.append(x[ok])
        ys.append(y[ok])
    xs.extend(tx([v], plot.xlog) for v in plot.vlines)
    ys.extend(tx([v], plot.ylog) for v in plot.hlines)
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    allx, ally = allx[np.isfinite(allx)], ally[np.isfinite(ally)]
    x0, x1 = (allx.min(), allx.max()) if allx.size else (0.0, 1.0)
    y0, y1 = (ally.min(), ally.max()) if ally.size else (0.0, 1.0)
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1, plot.xlog):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{mt + ph}" x2="{X:.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{mt + ph + 18}" font-size="11" text-anchor="middle">{_label(t, plot.xlog)}</text>')
    for t in _ticks(y0, y1, plot.ylog):
        Y = py(t)
        out.append(f'<line x1="{ml - 5}" y1="{Y:.2f}" x2="{ml}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{Y + 4:.2f}" font-size="11" text-anchor="end">{_label(t, plot.ylog)}</text>')
    for v in plot.vlines:
        X = px(float(tx([v], plot.xlog)[0]))
        out.append(f'<line x1="{X:.2f}" y1="{mt}" x2="{X:.2f}" y2="{mt + ph}" stroke="gray" stroke-dasharray="2,3"/>')
    for v in plot.hlines:
        Y = py(float(tx([v], plot.ylog)[0]))
        out.append(f'<line x1="{ml}" y1="{Y:.2f}" x2="{ml + pw}" y2="{Y:.2f}" stroke="gray" stroke-dasharray="2,3"/>')
    for k, (s, x, y) in enumerate(zip(plot.series, xs, ys)):
        color = s.color or PALETTE[k % len(PALETTE)]
        if s.markers:
            for a, b in zip(x, y):
                out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
        elif x.size:
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            dash = ' stroke-dasharray="2,3"' if s.dotted else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
    legend = [(s, PALETTE[k % len(PALETTE)] if s.color is None else s.color)
              for k, s in enumerate(plot.series) if s.label]
    for k, (s, color) in enumerate(legend):
        Y = mt + 14 + 14 * k
        dash = ' stroke-dasharray="2,3"' if s.dotted else ""
        out.append(f'<line x1="{ml + pw - 120}" y1="{Y - 4}" x2="{ml + pw - 100}" y2="{Y - 4}" stroke="{color}"{dash}/>')
        out.append(f'<text x="{ml + pw - 95}" y="{Y}" font-size="11">{escape(s.label)}</text>')
    out.append(f'<text x="{W / 2:.1f}" y="20" font-size="14" text-anchor="middle">{escape(plot.title)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{H - 12}" font-size="12" text-anchor="middle">{escape(plot.xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(plot.ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save(plot: Plot, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(plot))
    return path

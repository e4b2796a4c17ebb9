"""Minimal SVG line plots (polylines, axes, ticks, markers, legend), written as plain text.

Output depends only on the data, so identical inputs give identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    dashed: bool = False


@dataclass
class Marker:
    label: str
    x: float
    y: float


@dataclass
class Plot:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    markers: list[Marker] = field(default_factory=list)
    vlines: list[Marker] = field(default_factory=list)
    logy: bool = False

    def add(self, label, x, y, dashed=False) -> "Plot":
        self.series.append(Series(label, np.asarray(x, dtype=float), np.asarray(y, dtype=float), dashed))
        return self

    def render(self) -> str:
        return render(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.render())
        return path


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    """Round tick values covering [lo, hi] with steps 1, 2 or 5 times a power of ten."""
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _range(values: list[np.ndarray]) -> tuple[float, float]:
    finite = np.concatenate([v[np.isfinite(v)] for v in values]) if values else np.array([])
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


def render(plot: Plot) -> str:
    ys = [np.log10(s.y) if plot.logy else s.y for s in plot.series]
    ys = [np.where(np.isfinite(y), y, np.nan) for y in ys]
    mk_y = [np.log10(m.y) if plot.logy else m.y for m in plot.markers]
    x0, x1 = _range([s.x for s in plot.series] + [np.array([m.x for m in plot.markers + plot.vlines])])
    y0, y1 = _range(ys + [np.array(mk_y, dtype=float)])
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    px = lambda x: L + (x - x0) / (x1 - x0) * (R - L)
    py = lambda y: B - (y - y0) / (y1 - y0) * (B - T)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(plot.title)}</text>',
        f'<rect x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" stroke="black"/>',
    ]
    for t in nice_ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{B}" x2="{px(t):.2f}" y2="{B + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{B + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in nice_ticks(y0, y1):
        label = _fmt(10**t) if plot.logy else _fmt(t)
        out.append(f'<line x1="{L - 5}" y1="{py(t):.2f}" x2="{L}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{(L + R) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(plot.xlabel)}</text>')
    out.append(f'<text x="16" y="{(T + B) / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {(T + B) / 2:.1f})">{escape(plot.ylabel)}</text>')

    for i, (s, y) in enumerate(zip(plot.series, ys)):
        color = COLORS[i % len(COLORS)]
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        # break the polyline at non-finite values
        ok = np.isfinite(y) & np.isfinite(s.x)
        runs, cur = [], []
        for xv, yv, good in zip(s.x, y, ok):
            if good:
                cur.append(f"{px(xv):.2f},{py(yv):.2f}")
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for run in runs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} points="{" ".join(run)}"/>')
        ly = T + 16 + 16 * i
        out.append(f'<line x1="{R - 150}" y1="{ly - 4}" x2="{R - 126}" y2="{ly - 4}" stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{R - 120}" y="{ly}">{escape(s.label)}</text>')

    for v in plot.vlines:
        out.append(f'<line x1="{px(v.x):.2f}" y1="{T}" x2="{px(v.x):.2f}" y2="{B}" stroke="#555" stroke-dasharray="3 3"/>')
        out.append(f'<text x="{px(v.x) + 4:.2f}" y="{B - 6}" fill="#555">{escape(v.label)}</text>')
    for m, my in zip(plot.markers, mk_y):
        out.append(f'<circle cx="{px(m.x):.2f}" cy="{py(my):.2f}" r="4" fill="black"/>')
        out.append(f'<text x="{px(m.x) + 7:.2f}" y="{py(my) - 7:.2f}">{escape(m.label)}</text>')
    out.append("</svg>\n")
    return "\n".join(out)

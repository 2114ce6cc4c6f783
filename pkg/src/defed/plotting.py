"""Standalone SVG output: metric line charts and mixing-graph drawings."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .topology import MixingMatrix

__all__ = ["PlotError", "COLORS", "line_chart_svg", "graph_svg"]

# series colours are fixed by index so the same trace order always looks the same
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 720, 480
LEFT, RIGHT, TOP, BOTTOM = 80, 160, 40, 60


class PlotError(ValueError):
    pass


def _ticks(lo: float, hi: float, log: bool, n: int = 5) -> list[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, math.ceil((b - a) / 8))
        return [float(e) for e in range(a, b + 1, step) if lo - 1e-9 <= e <= hi + 1e-9]
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(v))}"
    return f"{v:.4g}"


def line_chart_svg(
    series: Sequence[tuple[str, np.ndarray, np.ndarray]],
    *,
    title: str = "",
    xlabel: str = "t",
    ylabel: str = "",
    logx: bool = False,
    logy: bool = False,
) -> str:
    """Render ``(name, x, y)`` series as one SVG document.

    On log axes, non-positive points are dropped (and must not leave a series empty).
    """
    if not series:
        raise PlotError("nothing to plot")
    prepared = []
    for name, x, y in series:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y)
        if logx:
            keep &= x > 0
        if logy:
            keep &= y > 0
        if not keep.any():
            raise PlotError(f"series {name!r} has no plottable points" + (" on log axes" if logx or logy else ""))
        x, y = x[keep], y[keep]
        prepared.append((name, np.log10(x) if logx else x, np.log10(y) if logy else y))

    xs = np.concatenate([p[1] for p in prepared])
    ys = np.concatenate([p[2] for p in prepared])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        pad = abs(y0) * 0.05 or 0.5
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    sx = lambda v: LEFT + (v - x0) / (x1 - x0) * pw
    sy = lambda v: TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(x0, x1, logx):
        px = sx(v)
        out.append(f'<line x1="{px:.2f}" y1="{TOP + ph}" x2="{px:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{TOP + ph + 20}" font-size="12" text-anchor="middle">{_label(v, logx)}</text>')
    for v in _ticks(y0, y1, logy):
        py = sy(v)
        out.append(f'<line x1="{LEFT - 5}" y1="{py:.2f}" x2="{LEFT}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{py + 4:.2f}" font-size="12" text-anchor="end">{_label(v, logy)}</text>')
    if title:
        out.append(f'<text x="{LEFT + pw / 2}" y="{TOP - 15}" font-size="15" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 15}" font-size="13" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(
            f'<text x="20" y="{TOP + ph / 2}" font-size="13" text-anchor="middle" '
            f'transform="rotate(-90 20 {TOP + ph / 2})">{escape(ylabel)}</text>'
        )
    for i, (name, x, y) in enumerate(prepared):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 15 + 20 * i
        out.append(f'<line x1="{WIDTH - RIGHT + 15}" y1="{ly}" x2="{WIDTH - RIGHT + 40}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 45}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def graph_svg(W: MixingMatrix, size: int = 400) -> str:
    """Clients on a circle, one chord per positive off-diagonal weight."""
    K = W.size
    c, r = size / 2, size / 2 - 30
    pos = [(c + r * math.cos(2 * math.pi * k / K - math.pi / 2), c + r * math.sin(2 * math.pi * k / K - math.pi / 2)) for k in range(K)]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    w = W.weights
    for i in range(K):
        for j in range(i + 1, K):
            if w[i, j] > 0:
                (x1, y1), (x2, y2) = pos[i], pos[j]
                out.append(f'<line class="edge" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="#555"/>')
    for k, (x, y) in enumerate(pos):
        out.append(f'<circle class="node" cx="{x:.2f}" cy="{y:.2f}" r="11" fill="{COLORS[0]}"/>')
        out.append(f'<text x="{x:.2f}" y="{y + 4:.2f}" font-size="11" fill="white" text-anchor="middle">{k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

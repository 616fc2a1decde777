"""Minimal SVG 1.1 emitter for log-log plots of a quantity against h."""
import math
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 480
MARGIN = 70
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _decades(lo: float, hi: float) -> Tuple[int, int]:
    lo_exp = math.floor(math.log10(lo))
    hi_exp = math.ceil(math.log10(hi))
    if hi_exp == lo_exp:
        hi_exp += 1
    return lo_exp, hi_exp


def _finite_points(xs: Sequence[float], ys: Sequence[float]) -> List[Tuple[float, float]]:
    return [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0 and np.isfinite(x) and np.isfinite(y)]


def loglog_plot(
    series: Dict[str, Tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str = "h",
    ylabel: str = "lambda",
) -> str:
    """
    Render named (x, y) series on log-log axes with decade ticks.

    Non-positive and non-finite points are dropped.
    """
    points = {name: _finite_points(xs, ys) for name, (xs, ys) in series.items()}
    all_x = [p[0] for pts in points.values() for p in pts] or [0.1, 1.0]
    all_y = [p[1] for pts in points.values() for p in pts] or [0.1, 1.0]
    x0, x1 = _decades(min(all_x), max(all_x))
    y0, y1 = _decades(min(all_y), max(all_y))
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def sx(x: float) -> float:
        return MARGIN + (math.log10(x) - x0) / (x1 - x0) * plot_w

    def sy(y: float) -> float:
        return HEIGHT - MARGIN - (math.log10(y) - y0) / (y1 - y0) * plot_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>',
    ]
    for e in range(x0, x1 + 1):
        x = MARGIN + (e - x0) / (x1 - x0) * plot_w
        out.append(f'<line x1="{x:.2f}" y1="{HEIGHT - MARGIN}" x2="{x:.2f}" y2="{HEIGHT - MARGIN + 6}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{HEIGHT - MARGIN + 22}" text-anchor="middle" font-size="12">1e{e}</text>')
    for e in range(y0, y1 + 1):
        y = HEIGHT - MARGIN - (e - y0) / (y1 - y0) * plot_h
        out.append(f'<line x1="{MARGIN - 6}" y1="{y:.2f}" x2="{MARGIN}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN - 10}" y="{y + 4:.2f}" text-anchor="end" font-size="12">1e{e}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="14">{escape(xlabel)}</text>')
    out.append(
        f'<text x="18" y="{HEIGHT / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {HEIGHT / 2})">{escape(ylabel)}</text>'
    )

    for i, (name, pts) in enumerate(points.items()):
        color = COLORS[i % len(COLORS)]
        if pts:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in pts:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        ly = MARGIN + 18 * (i + 1)
        out.append(f'<line x1="{WIDTH - MARGIN - 150}" y1="{ly}" x2="{WIDTH - MARGIN - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 125}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

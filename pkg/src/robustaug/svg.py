"""Stateless SVG rendering: line charts, heatmaps and bar strips.

Every plotted value is written into a ``data-v`` (and ``data-x``) attribute,
so a figure can be checked against the CSV it was drawn from.
"""
from __future__ import annotations

import re
from html import escape
from typing import Sequence

import numpy as np

WIDTH, HEIGHT, MARGIN = 640, 400, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v: float) -> str:
    return f"{float(v):.10g}"


def _frame(title: str, body: list, width: int = WIDTH, height: int = HEIGHT) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _scale(lo: float, hi: float, a: float, b: float):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a name to (xs, ys)."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()]) if series else np.zeros(1)
    sx = _scale(xs.min(), xs.max(), MARGIN, WIDTH - MARGIN)
    sy = _scale(ys.min(), ys.max(), HEIGHT - MARGIN, MARGIN)
    body = [f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" transform="rotate(-90 14 {HEIGHT / 2})" '
            f'text-anchor="middle">{escape(ylabel)}</text>',
            f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end">{_num(ys.min())}</text>',
            f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end">{_num(ys.max())}</text>']
    for k, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        body.append(f'<g class="series" data-name="{escape(str(name))}">')
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for a, b in zip(x, y):
            body.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2" fill="{color}" '
                        f'data-x="{_num(a)}" data-v="{_num(b)}"/>')
        body.append("</g>")
        body.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * k}" fill="{color}">{escape(str(name))}</text>')
    return _frame(title, body)


def _color(t: float) -> str:
    # diverging blue (t=0) - white (t=0.5) - red (t=1)
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        s = t / 0.5
        r, g, b = 255 * s, 255 * s, 255
    else:
        s = (1 - t) / 0.5
        r, g, b = 255, 255 * s, 255 * s
    return f"#{int(r):02x}{int(g):02x}{int(b):02x}"


def heatmap(values: np.ndarray, title: str = "", overlay: np.ndarray | None = None) -> str:
    """Cells coloured around zero (negative blue, positive red); ``overlay`` outlines marked cells."""
    values = np.asarray(values, float)
    n, m = values.shape
    cw = (WIDTH - 2 * MARGIN) / m
    ch = (HEIGHT - 2 * MARGIN) / n
    span = float(np.abs(values).max()) or 1.0
    body = []
    for i in range(n):
        for j in range(m):
            v = values[i, j]
            stroke = ' stroke="black" stroke-width="0.6"' if overlay is not None and overlay[i, j] else ""
            body.append(f'<rect x="{MARGIN + j * cw:.2f}" y="{MARGIN + (n - 1 - i) * ch:.2f}" width="{cw:.2f}" '
                        f'height="{ch:.2f}" fill="{_color(0.5 + v / (2 * span))}"{stroke} '
                        f'data-i="{i}" data-j="{j}" data-v="{_num(v)}"/>')
    return _frame(title, body)


def bar_strip(matrix: np.ndarray, labels: Sequence[str] = (), title: str = "") -> str:
    """One horizontal strip per row; a dark tick wherever the entry is true."""
    matrix = np.asarray(matrix, bool)
    rows, cols = matrix.shape
    cw = (WIDTH - 2 * MARGIN) / max(cols, 1)
    rh = (HEIGHT - 2 * MARGIN) / max(rows, 1)
    body = []
    for r in range(rows):
        y = MARGIN + r * rh
        name = labels[r] if r < len(labels) else str(r)
        body.append(f'<text x="{MARGIN - 4}" y="{y + rh / 2:.2f}" text-anchor="end">{escape(str(name))}</text>')
        for c in np.flatnonzero(matrix[r]):
            body.append(f'<rect x="{MARGIN + c * cw:.3f}" y="{y:.2f}" width="{max(cw, 0.5):.3f}" '
                        f'height="{rh * 0.8:.2f}" fill="#d62728" data-i="{r}" data-j="{c}" data-v="1"/>')
    return _frame(title, body)


_ATTR = re.compile(r'data-v="([^"]+)"')


def data_values(svg: str) -> list:
    """Every ``data-v`` value in document order."""
    return [float(v) for v in _ATTR.findall(svg)]

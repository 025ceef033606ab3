"""Minimal SVG output: scatter plots with overlaid polylines and line charts."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class _Frame:
    def __init__(self, xlim, ylim, width=480, height=360, pad=40):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.w, self.h, self.pad = width, height, pad

    def px(self, x):
        return self.pad + (x - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.pad)

    def py(self, y):
        return self.h - self.pad - (y - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.pad)

    def open(self, title):
        p = self.pad
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" viewBox="0 0 {self.w} {self.h}">',
               f'<rect x="0" y="0" width="{self.w}" height="{self.h}" fill="white"/>',
               f'<line x1="{p}" y1="{self.h - p}" x2="{self.w - p}" y2="{self.h - p}" stroke="black"/>',
               f'<line x1="{p}" y1="{p}" x2="{p}" y2="{self.h - p}" stroke="black"/>',
               f'<text x="{self.w / 2:.1f}" y="{p / 2:.1f}" text-anchor="middle" font-size="13">{escape(title)}</text>',
               f'<text x="{p}" y="{self.h - p / 3:.1f}" font-size="10">{self.x0:.3g}</text>',
               f'<text x="{self.w - p}" y="{self.h - p / 3:.1f}" font-size="10" text-anchor="end">{self.x1:.3g}</text>',
               f'<text x="{p / 8:.1f}" y="{self.h - p}" font-size="10">{self.y0:.3g}</text>',
               f'<text x="{p / 8:.1f}" y="{p + 10}" font-size="10">{self.y1:.3g}</text>']
        return out

    def polyline(self, pts, color, dash=None, width=1.5):
        pts = np.asarray(pts, dtype=float)
        if pts.shape[0] < 2:
            return ""
        coords = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in pts)
        d = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>'


def _limits(arrays, pad=0.05):
    allp = np.vstack([np.asarray(a, dtype=float).reshape(-1, 2) for a in arrays if len(a)])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return (lo[0] - pad * span[0], hi[0] + pad * span[0]), (lo[1] - pad * span[1], hi[1] + pad * span[1])


def scatter(points, labels, lines=(), markers=(), title="", xlim=None, ylim=None) -> str:
    """Points colored by label; ``lines`` is a list of (name, polyline points, dash)."""
    points = np.asarray(points, dtype=float)
    if xlim is None or ylim is None:
        xl, yl = _limits([points])
        xlim = xlim or xl
        ylim = ylim or yl
    fr = _Frame(xlim, ylim)
    out = fr.open(title)
    for k, (name, pts, dash) in enumerate(lines):
        out.append(fr.polyline(pts, COLORS[(k + 2) % len(COLORS)], dash))
        out.append(f'<text x="{fr.w - fr.pad}" y="{fr.pad + 12 * (k + 1)}" font-size="10" text-anchor="end" '
                   f'fill="{COLORS[(k + 2) % len(COLORS)]}">{escape(name)}</text>')
    for name, pts in markers:
        for x, y in np.asarray(pts, dtype=float).reshape(-1, 2):
            out.append(f'<circle cx="{fr.px(x):.2f}" cy="{fr.py(y):.2f}" r="0.8" fill="#555"><title>{escape(name)}</title></circle>')
    for (x, y), lab in zip(points, labels):
        c = COLORS[0] if lab > 0 else COLORS[1]
        out.append(f'<circle cx="{fr.px(x):.2f}" cy="{fr.py(y):.2f}" r="2.5" fill="{c}"/>')
    out.append("</svg>")
    return "\n".join(s for s in out if s) + "\n"


def line_chart(x, series, title="", xlabel="", ylabel="") -> str:
    """``series`` maps a name to y values aligned with ``x``."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    allx = np.concatenate([x] * len(ys)) if ys else x
    ally = np.concatenate(ys) if ys else np.zeros_like(x)
    (x0, x1), (y0, y1) = _limits([np.column_stack([allx, ally])])
    fr = _Frame((x0, x1), (y0, y1))
    out = fr.open(title)
    for k, (name, y) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        out.append(fr.polyline(np.column_stack([x, y]), color))
        out.append(f'<text x="{fr.w - fr.pad}" y="{fr.pad + 12 * (k + 1)}" font-size="10" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append(f'<text x="{fr.w / 2:.1f}" y="{fr.h - 4}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="12" y="{fr.h / 2:.1f}" font-size="11" transform="rotate(-90 12 {fr.h / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(s for s in out if s) + "\n"


def hyperplane_segment(w, b, xlim, ylim) -> np.ndarray:
    """Clip the line w.x + b = 0 to a box; empty when it misses."""
    w = np.asarray(w, dtype=float)
    pts = []
    if abs(w[1]) > 1e-15:
        for x in xlim:
            y = -(b + w[0] * x) / w[1]
            if ylim[0] - 1e-12 <= y <= ylim[1] + 1e-12:
                pts.append((x, y))
    if abs(w[0]) > 1e-15:
        for y in ylim:
            x = -(b + w[1] * y) / w[0]
            if xlim[0] - 1e-12 <= x <= xlim[1] + 1e-12:
                pts.append((x, y))
    if len(pts) < 2:
        return np.zeros((0, 2))
    pts = np.array(sorted(set(pts)))
    return pts[[0, -1]]

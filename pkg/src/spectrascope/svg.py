"""Minimal, dependency-free SVG charts with deterministic output."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 64, 20, 36, 48


def _fmt(x: float) -> str:
    return f"{x:.3f}"


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return _PAD_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - _PAD_L - _PAD_R)

    def py(self, y):
        return HEIGHT - _PAD_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - _PAD_T - _PAD_B)


def _header(title: str, xlabel: str, ylabel: str, frame: _Frame) -> list[str]:
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{_PAD_L}" y="{_PAD_T}" width="{WIDTH - _PAD_L - _PAD_R}" '
        f'height="{HEIGHT - _PAD_T - _PAD_B}" fill="none" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        xv = frame.x0 + k * (frame.x1 - frame.x0) / 4
        yv = frame.y0 + k * (frame.y1 - frame.y0) / 4
        out.append(
            f'<text x="{_fmt(frame.px(xv))}" y="{HEIGHT - _PAD_B + 16}" text-anchor="middle" '
            f'font-size="10">{xv:.3g}</text>'
        )
        out.append(
            f'<text x="{_PAD_L - 6}" y="{_fmt(frame.py(yv) + 3)}" text-anchor="end" font-size="10">{yv:.3g}</text>'
        )
    return out


def density_svg(
    x: np.ndarray,
    density: np.ndarray,
    *,
    title: str = "spectral density",
    log_y: bool = True,
    rug: list[float] | None = None,
    xlabel: str = "eigenvalue",
) -> str:
    """Filled step curve of a density, optionally on a log10 y-axis, with rug marks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(density, dtype=float)
    rug = list(rug or [])
    if log_y:
        floor = max(y.max(), 1e-300) * 1e-8
        y = np.log10(np.maximum(y, floor))
        ylabel = "log10 density"
    else:
        ylabel = "density"
    xs = np.concatenate([x, rug]) if rug else x
    frame = _Frame((float(xs.min()), float(xs.max())), (float(y.min()), float(y.max())))
    out = _header(title, xlabel, ylabel, frame)
    base = frame.py(frame.y0)
    pts = [f"{_fmt(frame.px(x[0]))},{_fmt(base)}"]
    for k in range(len(x)):
        right = x[k + 1] if k + 1 < len(x) else x[k]
        pts.append(f"{_fmt(frame.px(x[k]))},{_fmt(frame.py(y[k]))}")
        pts.append(f"{_fmt(frame.px(right))},{_fmt(frame.py(y[k]))}")
    pts.append(f"{_fmt(frame.px(x[-1]))},{_fmt(base)}")
    out.append(f'<polygon points="{" ".join(pts)}" fill="#4e79a7" fill-opacity="0.5" stroke="#4e79a7"/>')
    for r in rug:
        xr = frame.px(r)
        out.append(f'<line x1="{_fmt(xr)}" y1="{_fmt(base)}" x2="{_fmt(xr)}" y2="{_fmt(base - 12)}" stroke="#e15759"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(
    x: np.ndarray,
    y: np.ndarray,
    highlight: np.ndarray,
    *,
    title: str = "knockout attribution",
    xlabel: str = "after knockout",
    ylabel: str = "before knockout",
) -> str:
    """Scatter with the identity line; highlighted points drawn in a second colour."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lo = float(min(x.min(), y.min()))
    hi = float(max(x.max(), y.max()))
    if not math.isfinite(lo) or not math.isfinite(hi):
        raise ValueError("scatter values must be finite")
    frame = _Frame((lo, hi), (lo, hi))
    out = _header(title, xlabel, ylabel, frame)
    out.append(
        f'<line x1="{_fmt(frame.px(lo))}" y1="{_fmt(frame.py(lo))}" x2="{_fmt(frame.px(hi))}" '
        f'y2="{_fmt(frame.py(hi))}" stroke="black"/>'
    )
    for xv, yv, flag in zip(x, y, highlight):
        colour = "#4e79a7" if flag else "#f28e2b"
        out.append(f'<circle cx="{_fmt(frame.px(xv))}" cy="{_fmt(frame.py(yv))}" r="3" fill="{colour}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

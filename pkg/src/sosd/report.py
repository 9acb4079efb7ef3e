"""Two-panel SVG report: loss above, per-matrix SD variation (log scale) below."""

from __future__ import annotations

import math
import os
import shutil
from xml.sax.saxutils import escape

import numpy as np

from sosd.model import TRAINABLE
from sosd.telemetry import MetricsRecord, series

__all__ = ["render_report", "render_svg"]

WIDTH, HEIGHT = 880, 640
MARGIN_L, MARGIN_R = 80, 130
PANELS = ((40, 250), (340, 580))  # (top, bottom) pixel rows of each plot area
COLORS = {"W_Q": "#1f77b4", "W_K": "#d62728", "W_V": "#2ca02c"}
FALLBACK_COLORS = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step) + 1)]


class _Axes:
    def __init__(self, x0, x1, y0, y1, top, bottom, log):
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1
        self.top, self.bottom, self.log = top, bottom, log
        self.left, self.right = MARGIN_L, WIDTH - MARGIN_R

    def px(self, x):
        span = self.x1 - self.x0 or 1.0
        return self.left + (x - self.x0) / span * (self.right - self.left)

    def py(self, y):
        if self.log:
            y, lo, hi = math.log10(y), math.log10(self.y0), math.log10(self.y1)
        else:
            lo, hi = self.y0, self.y1
        span = hi - lo or 1.0
        return self.bottom - (y - lo) / span * (self.bottom - self.top)


def _points(ax: _Axes, xs, ys) -> str:
    pts = []
    for x, y in zip(xs, ys):
        if not np.isfinite(y) or (ax.log and y <= 0):
            continue
        pts.append(f"{ax.px(x):.2f},{ax.py(y):.2f}")
    return " ".join(pts)


def _frame(ax: _Axes, title: str, ylabel: str) -> list[str]:
    out = [
        f'<rect x="{ax.left}" y="{ax.top}" width="{ax.right - ax.left}" '
        f'height="{ax.bottom - ax.top}" fill="none" stroke="#444"/>',
        f'<text x="{(ax.left + ax.right) / 2:.1f}" y="{ax.top - 10}" text-anchor="middle" '
        f'font-size="14">{escape(title)}</text>',
        f'<text x="18" y="{(ax.top + ax.bottom) / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 18 {(ax.top + ax.bottom) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for x in _nice_ticks(ax.x0, ax.x1):
        px = ax.px(x)
        out.append(f'<line class="tick" x1="{px:.2f}" y1="{ax.bottom}" x2="{px:.2f}" y2="{ax.bottom + 5}" stroke="#444"/>')
        out.append(f'<text x="{px:.2f}" y="{ax.bottom + 18}" font-size="10" text-anchor="middle">{x:g}</text>')
    if ax.log:
        yt = [10.0**k for k in range(math.ceil(math.log10(ax.y0)), math.floor(math.log10(ax.y1)) + 1)]
    else:
        yt = _nice_ticks(ax.y0, ax.y1)
    for y in yt:
        py = ax.py(y)
        out.append(f'<line class="tick" x1="{ax.left - 5}" y1="{py:.2f}" x2="{ax.left}" y2="{py:.2f}" stroke="#444"/>')
        label = f"1e{round(math.log10(y))}" if ax.log else f"{y:g}"
        out.append(f'<text x="{ax.left - 8}" y="{py + 3:.2f}" font-size="10" text-anchor="end">{label}</text>')
    return out


def render_svg(records: list[MetricsRecord], onsets: dict[str, int | None] | None = None) -> str:
    """Return the SVG document for a trace.

    ``onsets`` maps matrix name to the detected SoSD onset step; each non-None
    entry becomes one vertical marker in the lower panel.
    """
    if len(records) < 2:
        raise ValueError("a report needs at least two trace rows")
    steps = np.array([r.step for r in records], dtype=np.float64)
    loss = np.array([r.loss for r in records])
    sd = {m: series(records, m, "sd_var") for m in TRAINABLE}
    x0, x1 = float(steps[0]), float(steps[-1])

    finite_loss = loss[np.isfinite(loss)]
    lo, hi = (float(finite_loss.min()), float(finite_loss.max())) if finite_loss.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    top = _Axes(x0, x1, min(lo, 0.0), hi * 1.05 if hi > 0 else hi, *PANELS[0], log=False)

    pos = np.concatenate([v[np.isfinite(v) & (v > 0)] for v in sd.values()])
    if pos.size:
        ylo = 10 ** math.floor(math.log10(pos.min()))
        yhi = 10 ** math.ceil(math.log10(pos.max()))
        if yhi == ylo:
            yhi *= 10
    else:
        ylo, yhi = 1e-6, 1.0
    bottom = _Axes(x0, x1, ylo, yhi, *PANELS[1], log=True)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        '<g id="loss-panel">',
        *_frame(top, "Training loss", "loss"),
        f'<polyline class="series" data-series="loss" fill="none" stroke="#000" stroke-width="1.2" '
        f'points="{_points(top, steps, loss)}"/>',
        "</g>",
        '<g id="sdvar-panel">',
        *_frame(bottom, "Singular distribution variation", "SD variation (log)"),
    ]
    for i, (m, v) in enumerate(sd.items()):
        color = COLORS.get(m, FALLBACK_COLORS[i % len(FALLBACK_COLORS)])
        parts.append(
            f'<polyline class="series" data-series="{escape(m)}" fill="none" stroke="{color}" '
            f'stroke-width="1" points="{_points(bottom, steps, v)}"/>'
        )
        ly = bottom.top + 16 + 16 * i
        lx = bottom.right + 12
        parts.append(f'<line class="legend" x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(m)}</text>')
    for m, k in (onsets or {}).items():
        if k is None:
            continue
        px = bottom.px(k)
        color = COLORS.get(m, "#555")
        parts.append(
            f'<line class="onset-marker" data-matrix="{escape(m)}" data-step="{k}" '
            f'x1="{px:.2f}" y1="{bottom.top}" x2="{px:.2f}" y2="{bottom.bottom}" '
            f'stroke="{color}" stroke-dasharray="4 3"/>'
        )
    parts += [
        "</g>",
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2:.1f}" y="{HEIGHT - 20}" font-size="12" '
        f'text-anchor="middle">step</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def render_report(records, out_path, onsets=None, trace_path=None) -> tuple[str, str | None]:
    """Write the SVG to ``out_path`` and copy the source trace next to it.

    Returns ``(svg_path, data_path)``; ``data_path`` is None when no trace file
    was given.
    """
    svg = render_svg(records, onsets)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    data_path = None
    if trace_path is not None:
        data_path = os.path.splitext(os.fspath(out_path))[0] + ".data.csv"
        if os.path.abspath(data_path) != os.path.abspath(trace_path):
            shutil.copyfile(trace_path, data_path)
    return os.fspath(out_path), data_path

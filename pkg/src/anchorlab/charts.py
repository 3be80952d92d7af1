"""Standalone SVG line charts from trajectory columns."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(series: dict, title: str, xlabel: str = "step", ylabel: str = "",
               width: int = 640, height: int = 360, logy: bool = False) -> str:
    """``series`` maps a legend label to ``(x, y)`` arrays; NaNs are dropped."""
    left, right, top, bottom = 70, 20, 40, 50
    pts = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logy:
            ok &= y > 0
        if ok.any():
            pts[name] = (x[ok], np.log10(y[ok]) if logy else y[ok])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if pts:
        xs = np.concatenate([p[0] for p in pts.values()])
        ys = np.concatenate([p[1] for p in pts.values()])
        x0, x1 = xs.min(), xs.max()
        y0, y1 = ys.min(), ys.max()
        x1 = x1 if x1 > x0 else x0 + 1
        y1 = y1 if y1 > y0 else y0 + 1
        pw, ph = width - left - right, height - top - bottom

        def sx(v):
            return left + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return top + ph - (v - y0) / (y1 - y0) * ph

        parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        for frac in np.linspace(0, 1, 5):
            yv = y0 + frac * (y1 - y0)
            label = f"{10 ** yv:.3g}" if logy else f"{yv:.3g}"
            parts.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{label}</text>')
            xv = x0 + frac * (x1 - x0)
            parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.4g}</text>')
        for i, (name, (x, y)) in enumerate(pts.items()):
            color = PALETTE[i % len(PALETTE)]
            if len(x) > 2000:
                keep = np.linspace(0, len(x) - 1, 2000).astype(int)
                x, y = x[keep], y[keep]
            path = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{path}"/>')
            parts.append(f'<text x="{left + 8}" y="{top + 16 + 14 * i}" fill="{color}">{escape(name)}</text>')
    parts.append(f'<text x="{left + (width - left - right) / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{top + (height - top - bottom) / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + (height - top - bottom) / 2})">{escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_chart(path, *args, **kwargs):
    Path(path).write_text(line_chart(*args, **kwargs))

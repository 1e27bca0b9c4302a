"""Deterministic hand-rolled SVG plots (box plots and histograms).

Output is plain static SVG with the underlying numbers embedded in an
XML comment, so re-running with identical inputs is byte-identical.
"""

from __future__ import annotations

import numpy as np

from .util import atomic_write_text

_COLORS = ("#4878a8", "#e07a3f", "#5da05d", "#b05fa0", "#a0a04f", "#707070")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _header(width, height, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]


def _axis(parts, x0, y0, x1, y1, vmin, vmax, ticks=5):
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    for i in range(ticks + 1):
        v = vmin + (vmax - vmin) * i / ticks
        y = y0 + (y1 - y0) * i / ticks
        parts.append(f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 7}" y="{_fmt(y + 4)}" text-anchor="end" font-size="10">{_fmt(v)}</text>')


def boxplot_svg(path, groups: dict, title: str, ylabel: str = ""):
    """One box per (label -> list of values) group, quartile boxes, median line."""
    width, height = 120 + 90 * len(groups), 360
    x0, y_top, y_bot = 70, 50, height - 60
    vals = [v for g in groups.values() for v in g]
    vmin, vmax = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if vmax - vmin < 1e-9:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    pad = 0.05 * (vmax - vmin)
    vmin, vmax = vmin - pad, vmax + pad

    def ypix(v):
        return y_bot - (v - vmin) / (vmax - vmin) * (y_bot - y_top)

    parts = _header(width, height, title)
    _axis(parts, x0, y_bot, width - 20, y_top, vmin, vmax)
    if ylabel:
        parts.append(f'<text x="14" y="{(y_top + y_bot) / 2}" font-size="11" '
                     f'transform="rotate(-90 14 {(y_top + y_bot) / 2})" text-anchor="middle">{ylabel}</text>')
    data_comment = []
    for gi, (label, values) in enumerate(groups.items()):
        cx = x0 + 50 + 90 * gi
        arr = np.sort(np.asarray(values, dtype=float))
        data_comment.append(f"{label}: " + ",".join(_fmt(v) for v in arr))
        if arr.size == 0:
            continue
        q1, med, q3 = (np.percentile(arr, q) for q in (25, 50, 75))
        lo, hi = arr[0], arr[-1]
        color = _COLORS[gi % len(_COLORS)]
        parts.append(f'<line x1="{cx}" y1="{_fmt(ypix(lo))}" x2="{cx}" y2="{_fmt(ypix(hi))}" stroke="{color}"/>')
        for v in (lo, hi):
            parts.append(f'<line x1="{cx - 12}" y1="{_fmt(ypix(v))}" x2="{cx + 12}" y2="{_fmt(ypix(v))}" stroke="{color}"/>')
        parts.append(f'<rect x="{cx - 22}" y="{_fmt(ypix(q3))}" width="44" '
                     f'height="{_fmt(max(ypix(q1) - ypix(q3), 0.5))}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>')
        parts.append(f'<line x1="{cx - 22}" y1="{_fmt(ypix(med))}" x2="{cx + 22}" y2="{_fmt(ypix(med))}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{cx}" y="{y_bot + 16}" text-anchor="middle" font-size="10">{label}</text>')
    parts.append("<!-- data: " + " | ".join(data_comment) + " -->")
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")


def histogram_svg(path, series: dict, title: str, bins: int = 12, xlabel: str = ""):
    """Overlaid step histograms, one per (label -> list of values) series."""
    width, height = 520, 340
    x0, x1, y_bot, y_top = 60, width - 30, height - 55, 45
    vals = [v for s in series.values() for v in s]
    vmin, vmax = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if vmax - vmin < 1e-9:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    edges = np.linspace(vmin, vmax, bins + 1)
    hists = {label: np.histogram(np.asarray(s, dtype=float), bins=edges)[0]
             for label, s in series.items()}
    hmax = max((h.max() for h in hists.values() if h.size), default=1) or 1

    def xpix(v):
        return x0 + (v - vmin) / (vmax - vmin) * (x1 - x0)

    def ypix(c):
        return y_bot - c / hmax * (y_bot - y_top)

    parts = _header(width, height, title)
    parts.append(f'<line x1="{x0}" y1="{y_bot}" x2="{x1}" y2="{y_bot}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y_bot}" x2="{x0}" y2="{y_top}" stroke="black"/>')
    for i in range(5):
        v = vmin + (vmax - vmin) * i / 4
        parts.append(f'<text x="{_fmt(xpix(v))}" y="{y_bot + 16}" text-anchor="middle" font-size="10">{_fmt(v)}</text>')
    if xlabel:
        parts.append(f'<text x="{(x0 + x1) / 2}" y="{height - 14}" text-anchor="middle" font-size="11">{xlabel}</text>')
    data_comment = [f"edges: {','.join(_fmt(e) for e in edges)}"]
    for si, (label, _) in enumerate(series.items()):
        h = hists[label]
        color = _COLORS[si % len(_COLORS)]
        data_comment.append(f"{label}: " + ",".join(str(int(c)) for c in h))
        pts = [f"{_fmt(xpix(edges[0]))},{_fmt(y_bot)}"]
        for b in range(bins):
            pts.append(f"{_fmt(xpix(edges[b]))},{_fmt(ypix(h[b]))}")
            pts.append(f"{_fmt(xpix(edges[b + 1]))},{_fmt(ypix(h[b]))}")
        pts.append(f"{_fmt(xpix(edges[-1]))},{_fmt(y_bot)}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<rect x="{x1 - 130}" y="{y_top + 18 * si}" width="12" height="8" fill="{color}"/>')
        parts.append(f'<text x="{x1 - 112}" y="{y_top + 8 + 18 * si}" font-size="10">{label}</text>')
    parts.append("<!-- data: " + " | ".join(data_comment) + " -->")
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")

"""Standalone SVG rendering for trace grids. No plotting dependency."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .tracing import BUCKETS, TraceGrid, site_layers

CELL_W, CELL_H = 34, 22
LEFT, TOP = 130, 40

# colour at the top of each site's scale; the bottom is white
SITE_COLORS = {"hidden": (102, 45, 145), "mlp_out": (27, 120, 55), "attn_out": (178, 24, 43)}
BUCKET_LABELS = {
    "first_corrupted": "first corrupted",
    "middle_corrupted": "middle corrupted",
    "last_corrupted": "last corrupted",
    "first_subsequent": "first subsequent",
    "further": "further tokens",
    "last_token": "last token",
}


def _mix(top: tuple[int, int, int], t: float) -> str:
    r, g, b = (round(255 + (c - 255) * t) for c in top)
    return f"#{r:02x}{g:02x}{b:02x}"


def _fmt(x: float) -> str:
    return f"{x:.3g}"


def heatmap_svg(values: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str], title: str = "",
                color: tuple[int, int, int] = SITE_COLORS["hidden"]) -> str:
    """Min-max normalised heatmap. NaN cells are drawn grey and excluded from the scale."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("heatmap needs a non-empty 2-D grid")
    n_rows, n_cols = values.shape
    finite = values[np.isfinite(values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 0.0)
    flat = hi == lo
    width = LEFT + n_cols * CELL_W + 90
    height = TOP + n_rows * CELL_H + 60
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="{LEFT}" y="20" font-size="13">{escape(title)}</text>']
    for i, label in enumerate(row_labels):
        y = TOP + i * CELL_H
        out.append(f'<text x="{LEFT - 6}" y="{y + CELL_H * 0.7:.1f}" text-anchor="end">{escape(label)}</text>')
        for j in range(n_cols):
            v = values[i, j]
            x = LEFT + j * CELL_W
            if not math.isfinite(v):
                fill, shown = "#d9d9d9", "n/a"
            else:
                fill, shown = _mix(color, 0.5 if flat else (v - lo) / (hi - lo)), _fmt(v)
            out.append(f'<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" '
                       f'stroke="#ffffff"><title>{escape(row_labels[i])}, layer {escape(col_labels[j])}: {shown}'
                       f'</title></rect>')
            if n_rows * n_cols == 1:
                out.append(f'<text x="{x + CELL_W / 2}" y="{y + CELL_H * 0.7:.1f}" text-anchor="middle">{shown}</text>')
    base = TOP + n_rows * CELL_H
    for j, label in enumerate(col_labels):
        out.append(f'<text x="{LEFT + (j + 0.5) * CELL_W:.1f}" y="{base + 14}" text-anchor="middle">'
                   f'{escape(label)}</text>')
    out.append(f'<text x="{LEFT + n_cols * CELL_W / 2:.1f}" y="{base + 30}" text-anchor="middle">layer</text>')
    # colour bar with its endpoints printed
    bx = LEFT + n_cols * CELL_W + 20
    out.append(f'<rect x="{bx}" y="{TOP}" width="14" height="{n_rows * CELL_H / 2:.1f}" fill="{_mix(color, 1.0)}"/>')
    out.append(f'<rect x="{bx}" y="{TOP + n_rows * CELL_H / 2:.1f}" width="14" height="{n_rows * CELL_H / 2:.1f}" '
               f'fill="{_mix(color, 0.0)}" stroke="#999999"/>')
    out.append(f'<text class="scale-max" x="{bx + 18}" y="{TOP + 10}">{_fmt(hi)}</text>')
    out.append(f'<text class="scale-min" x="{bx + 18}" y="{base}">{_fmt(lo)}</text>')
    if flat:
        out.append(f'<text class="warning" x="{LEFT}" y="{base + 48}" fill="#b00000">'
                   f'warning: all cells equal ({_fmt(lo)}); colour scale is flat</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap_svg(grid: TraceGrid, site: str, title: str | None = None) -> str:
    """Heatmap of one site of a trace grid; all-NaN buckets and layers are dropped."""
    if site not in grid.aie:
        raise KeyError(f"grid has no site {site!r}")
    values = grid.aie[site]
    layers = [l for l in site_layers(site, values.shape[1] - 1) if not np.isnan(values[:, l]).all()]
    rows = [i for i in range(len(BUCKETS)) if not np.isnan(values[i, layers]).all()] if layers else []
    if not rows:
        raise ValueError(f"grid for {site!r} is empty")
    sub = values[np.ix_(rows, layers)]
    labels = [BUCKET_LABELS[BUCKETS[i]] for i in rows]
    return heatmap_svg(sub, labels, [str(l) for l in layers], title or f"AIE, {site}", SITE_COLORS.get(site, (0, 0, 0)))


def bars_svg(series: Mapping[str, Sequence[float]], col_labels: Sequence[str], title: str = "") -> str:
    """Grouped bars, one group per column label, one bar per series."""
    names = list(series)
    if not names:
        raise ValueError("no series to plot")
    palette = ["#662d91", "#1b7837", "#b2182b", "#2166ac"]
    data = np.array([series[n] for n in names], dtype=np.float64)
    top = max(float(np.nanmax(data)), 1e-12) if np.isfinite(data).any() else 1.0
    group_w, plot_h = 16 * len(names) + 10, 160
    width = 60 + group_w * len(col_labels) + 140
    height = 230
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="60" y="18" font-size="13">{escape(title)}</text>',
           f'<line x1="55" y1="{30 + plot_h}" x2="{60 + group_w * len(col_labels)}" y2="{30 + plot_h}" stroke="#000"/>',
           f'<text x="50" y="36" text-anchor="end">{_fmt(top)}</text>',
           f'<text x="50" y="{30 + plot_h}" text-anchor="end">0</text>']
    for j, label in enumerate(col_labels):
        gx = 60 + j * group_w
        for k, name in enumerate(names):
            v = data[k, j]
            if not math.isfinite(v):
                continue
            h = max(v, 0.0) / top * plot_h
            out.append(f'<rect class="bar" x="{gx + 16 * k}" y="{30 + plot_h - h:.1f}" width="14" height="{h:.1f}" '
                       f'fill="{palette[k % len(palette)]}"><title>{escape(name)}, layer {escape(label)}: '
                       f'{_fmt(v)}</title></rect>')
        out.append(f'<text x="{gx + group_w / 2 - 5:.1f}" y="{46 + plot_h}" text-anchor="middle">{escape(label)}</text>')
    lx = 70 + group_w * len(col_labels)
    for k, name in enumerate(names):
        out.append(f'<rect x="{lx}" y="{40 + 18 * k}" width="12" height="12" fill="{palette[k % len(palette)]}"/>')
        out.append(f'<text x="{lx + 16}" y="{50 + 18 * k}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

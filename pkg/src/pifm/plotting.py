"""Minimal SVG scatter panels, one <g> group per point-cloud layer."""
from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import as_points

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
PANEL = 320
MARGIN = 24
LEGEND_ROW = 14
MAX_POINTS = 600


def _thin(pts: np.ndarray, limit: int = MAX_POINTS) -> np.ndarray:
    if len(pts) <= limit:
        return pts
    return pts[np.linspace(0, len(pts) - 1, limit).round().astype(int)]


def _panel(title: str, layers: Sequence, x0: float, y0: float, colors: dict) -> list[str]:
    arrays = [as_points(pts)[:, :2] for _, pts in layers]
    allpts = np.concatenate(arrays) if arrays else np.zeros((1, 2))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    center = 0.5 * (lo + hi)
    inner = PANEL - 2 * MARGIN
    scale = inner / (1.1 * span)

    def to_px(p):
        px = x0 + PANEL / 2 + (p[:, 0] - center[0]) * scale
        py = y0 + PANEL / 2 - (p[:, 1] - center[1]) * scale
        return px, py

    out = ['<g class="panel">',
           f'<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="white" stroke="#999"/>',
           f'<text x="{x0 + 6}" y="{y0 + 16}" font-size="12" font-family="sans-serif">{escape(title)}</text>']
    for (label, _), pts in zip(layers, arrays):
        color = colors[label]
        px, py = to_px(_thin(pts))
        out.append(f'<g class="layer" data-label="{escape(label)}" fill="{color}" fill-opacity="0.55">')
        out.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6"/>' for a, b in zip(px, py))
        out.append("</g>")
    out.append("</g>")
    return out


def scatter_panels(panels: Sequence, path: str | Path, columns: int = 3) -> None:
    """Write an SVG with one panel per (title, [(label, points), ...]) entry.

    Layers sharing a label share a color; a legend lists every label once.
    """
    labels: list[str] = []
    for _, layers in panels:
        for label, _ in layers:
            if label not in labels:
                labels.append(label)
    colors = {lab: PALETTE[k % len(PALETTE)] for k, lab in enumerate(labels)}
    cols = max(1, min(columns, len(panels)))
    rows = (len(panels) + cols - 1) // cols
    legend_h = LEGEND_ROW * len(labels) + 10
    width, height = cols * PANEL, rows * PANEL + legend_h
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">']
    for k, (title, layers) in enumerate(panels):
        body.extend(_panel(title, layers, (k % cols) * PANEL, (k // cols) * PANEL, colors))
    y = rows * PANEL + 12
    body.append('<g class="legend" font-size="11" font-family="sans-serif">')
    for k, lab in enumerate(labels):
        yy = y + k * LEGEND_ROW
        body.append(f'<rect x="8" y="{yy - 8}" width="9" height="9" fill="{colors[lab]}"/>')
        body.append(f'<text x="22" y="{yy}">{escape(lab)}</text>')
    body.append("</g>")
    body.append("</svg>")
    Path(path).write_text("\n".join(body) + "\n")


def scatter(layers: Sequence, path: str | Path, title: str = "") -> None:
    scatter_panels([(title, layers)], path, columns=1)

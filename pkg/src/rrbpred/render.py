"""Static SVG figures: drivable area, history, ground truth and predicted means.

Everything inside the scene group is drawn in world coordinates (metres);
a single flipping transform maps them to the canvas, so drawn coordinates
can be checked against the map directly.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np

from .metrics import MultiModalPrediction
from .scene import ScenarioState, SceneMap

# colour, dash pattern per pipeline slot
PALETTE = (("#d62728", ""), ("#1f77b4", "6 3"), ("#2ca02c", "2 2"), ("#9467bd", "8 2 2 2"),
           ("#ff7f0e", "4 4"), ("#8c564b", "1 3"), ("#e377c2", "10 4"), ("#17becf", "3 1"))
ROAD_FILL = "#d9d9d9"


class RenderError(ValueError):
    pass


def _num(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _points(xy) -> str:
    return " ".join(f"{_num(x)},{_num(y)}" for x, y in np.asarray(xy, dtype=float))


def drivable_runs(scene_map: SceneMap):
    """Maximal horizontal runs of drivable cells as world rectangles ``(x, y, w, h)``."""
    grid, cs, (ox, oy) = scene_map.raster, scene_map.cell_size, scene_map.origin
    out = []
    for iy, row in enumerate(grid):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            out.append((ox + a * cs, oy + iy * cs, (b - a) * cs, cs))
    return out


def render_svg(state: ScenarioState, predictions: Mapping[str, MultiModalPrediction] | None = None,
               width: int = 800, margin: float = 5.0) -> str:
    """SVG document for one scenario and any number of named predictions."""
    predictions = dict(predictions or {})
    if len(predictions) > len(PALETTE):
        raise RenderError(f"at most {len(PALETTE)} pipelines per figure")
    m = state.map
    ny, nx = m.raster.shape
    x0, y0 = m.origin - margin
    x1, y1 = m.origin + np.array([nx, ny]) * m.cell_size + margin
    scale = width / (x1 - x0)
    legend_h = 18 * (len(predictions) + 2) + 8
    height = int(np.ceil((y1 - y0) * scale)) + legend_h
    stroke = 'vector-effect="non-scaling-stroke"'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<g id="scene" transform="matrix({_num(scale)} 0 0 {_num(-scale)} '
           f'{_num(-x0 * scale)} {_num(y1 * scale)})">',
           f'<g id="drivable" fill="{ROAD_FILL}" stroke="none">']
    for x, y, w, h in drivable_runs(m):
        out.append(f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(w)}" height="{_num(h)}"/>')
    out.append("</g>")
    out.append('<g id="centerlines" fill="none" stroke="#ffffff" stroke-width="1" stroke-dasharray="4 4">')
    for c in m.centerlines:
        out.append(f'<polyline {stroke} points="{_points(c.polyline)}"/>')
    out.append("</g>")
    for o in state.others:
        out.append(f'<polyline class="other" {stroke} fill="none" stroke="#7f7f7f" stroke-width="2" '
                   f'points="{_points(o.xy)}"/>')
    out.append(f'<polyline id="history" {stroke} fill="none" stroke="#000000" stroke-width="3" '
               f'points="{_points(state.ego.xy)}"/>')
    if state.ground_truth is not None:
        gt = np.vstack([state.ego.last, state.ground_truth])
        out.append(f'<polyline id="ground-truth" {stroke} fill="none" stroke="#000000" stroke-width="2" '
                   f'stroke-dasharray="1 3" points="{_points(gt)}"/>')
    for (name, pred), (colour, dash) in zip(predictions.items(), PALETTE):
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        for k, means in enumerate(pred.means):
            path = np.vstack([state.ego.last, means])
            out.append(f'<polyline class="prediction" data-pipeline="{escape(name)}" data-mode="{k}" {stroke} '
                       f'fill="none" stroke="{colour}" stroke-width="2"{dash_attr} points="{_points(path)}"/>')
    out.append("</g>")

    ly = height - legend_h + 18
    items = [("history", "#000000", ""), ("ground truth", "#000000", "1 3")]
    items += [(name, colour, dash) for name, (colour, dash) in zip(predictions, PALETTE)]
    out.append('<g id="legend" font-family="sans-serif" font-size="12">')
    for i, (label, colour, dash) in enumerate(items):
        y = ly + 18 * i
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="10" y1="{y - 4}" x2="40" y2="{y - 4}" stroke="{colour}" stroke-width="2"{dash_attr}/>')
        out.append(f'<text x="48" y="{y}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_figure(path, state: ScenarioState, predictions=None, **kw) -> Path:
    """Write a figure; the format follows the file extension (``.svg`` only)."""
    path = Path(path)
    if path.suffix.lower() != ".svg":
        raise RenderError(f"{path}: unsupported figure format {path.suffix!r}; use .svg")
    path.write_text(render_svg(state, predictions, **kw))
    return path


def parse_polylines(svg: str) -> dict:
    """``{(pipeline, mode): (n, 2) points}`` for every prediction polyline in an SVG from this module."""
    out = {}
    pat = re.compile(r'<polyline class="prediction" data-pipeline="([^"]*)" data-mode="(\d+)"[^>]*points="([^"]*)"')
    for name, mode, pts in pat.findall(svg):
        out[(name, int(mode))] = np.array([[float(v) for v in p.split(",")] for p in pts.split()])
    return out

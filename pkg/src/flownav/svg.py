"""Minimal SVG writers for path overlays and tracking plots."""

from __future__ import annotations

import numpy as np

from .fixtures import edge_runs

_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _polyline(points, color: str, width: float, label: str | None = None, dash: str | None = None) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    title = f"<title>{label}</title>" if label else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{_fmt(width)}"{extra} '
            f'points="{pts}">{title}</polyline>')


def mask_overlay(fluid: np.ndarray, pixel_size: float, paths: dict, scale: float = 4.0) -> str:
    """Mask (SOLID dark) with named paths in meters drawn on top."""
    rows, cols = fluid.shape
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(cols * scale)}" height="{_fmt(rows * scale)}" '
           f'viewBox="0 0 {cols} {rows}">', f'<rect width="{cols}" height="{rows}" fill="#ffffff"/>']
    for i in range(rows):
        for a, b in edge_runs(~fluid[i]):
            out.append(f'<rect x="{a}" y="{i}" width="{b - a + 1}" height="1" fill="#404040"/>')
    for k, (name, path) in enumerate(paths.items()):
        p = np.asarray(path, float).reshape(-1, 2) / pixel_size
        out.append(_polyline(p, _COLORS[k % len(_COLORS)], 0.4, name))
        if len(p):
            out.append(f'<circle cx="{_fmt(p[0, 0])}" cy="{_fmt(p[0, 1])}" r="0.8" fill="{_COLORS[k % len(_COLORS)]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def tracking_plot(t, x, x_d, err, title: str = "", size: float = 320.0) -> str:
    """Reference and actual trajectory (left) and error norm over time (right)."""
    x = np.asarray(x, float)
    x_d = np.asarray(x_d, float)
    both = np.vstack([x, x_d])
    lo = both.min(axis=0)
    span = max(float(np.max(both.max(axis=0) - lo)), 1e-300)
    pad = 10.0

    def to_xy(p):
        q = (p - lo) / span * (size - 2 * pad) + pad
        return np.c_[q[:, 0], size - q[:, 1]]

    t = np.asarray(t, float)
    err = np.asarray(err, float)
    emax = max(float(err.max()), 1e-300) if err.size else 1.0
    tspan = max(float(t[-1] - t[0]), 1e-300) if t.size else 1.0
    curve = np.c_[size + pad + (t - t[0]) / tspan * (size - 2 * pad), size - pad - err / emax * (size - 2 * pad)]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(2 * size)}" height="{_fmt(size + 20)}">',
        f'<text x="{pad}" y="{size + 15}" font-size="11">{title}</text>',
        _polyline(to_xy(x_d), "#1f77b4", 1.0, "reference", "4 2"),
        _polyline(to_xy(x), "#d62728", 1.0, "actual"),
        f'<line x1="{size + pad}" y1="{size - pad}" x2="{2 * size - pad}" y2="{size - pad}" stroke="#000"/>',
        f'<line x1="{size + pad}" y1="{pad}" x2="{size + pad}" y2="{size - pad}" stroke="#000"/>',
        f'<text x="{size + pad + 2}" y="{pad + 10}" font-size="10">max |e| = {emax:.3e} m</text>',
        _polyline(curve, "#2ca02c", 1.0, "error norm"),
        "</svg>",
    ]
    return "\n".join(out) + "\n"

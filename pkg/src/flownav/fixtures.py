"""Synthetic channel geometries used by the demos, the CLI and the test-suite."""

from __future__ import annotations

import numpy as np

from .errors import FlownavError
from .grid import BoundarySegment, ChannelMask, straight_channel

__all__ = ["straight_channel", "y_bifurcation", "obstacle_channel", "random_channel", "edge_runs"]


def edge_runs(column: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, stop) index pairs of consecutive True entries."""
    runs = []
    start = None
    for k, flag in enumerate(list(column) + [False]):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            runs.append((start, k - 1))
            start = None
    return runs


def _polyline_band(shape, points, half_width) -> np.ndarray:
    """Pixels whose centers lie within ``half_width`` (pixels) of a polyline."""
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols] + 0.5
    best = np.full(shape, np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        t = ((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy)
        t = np.clip(t, 0.0, 1.0)
        d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        best = np.minimum(best, d)
    return best <= half_width


def _edge_segments(fluid: np.ndarray, edge: str, v_inlet: float = 0.0) -> list[BoundarySegment]:
    line = {"left": fluid[:, 0], "right": fluid[:, -1], "top": fluid[0, :], "bottom": fluid[-1, :]}[edge]
    return [BoundarySegment(edge, a, b, v_inlet) for a, b in edge_runs(line)]


def y_bifurcation(width: int = 96, height: int = 64, pixel_size: float = 1e-5, v_inlet: float = 1e-3,
                  trunk: int = 16, branch: int = 12) -> ChannelMask:
    """Mirror-symmetric Y: one trunk entering on the left, two equal branches leaving on the right."""
    if height % 2:
        raise ValueError("height must be even for an exactly symmetric Y")
    half = height // 2
    mid = float(half)
    fork = width / 3.0
    upper = [(-1.0, mid), (fork, mid), (2.0 * width / 3.0, mid - height / 4.0), (width + 1.0, mid - height / 4.0)]
    trunk_band = _polyline_band((height, width), [(-1.0, mid), (fork, mid)], trunk / 2.0)
    branch_band = _polyline_band((height, width), upper[1:], branch / 2.0)
    fluid = trunk_band | branch_band
    fluid[half:] = fluid[:half][::-1]
    inlets = _edge_segments(fluid, "left", v_inlet)
    outlets = _edge_segments(fluid, "right")
    return ChannelMask.from_array(fluid, pixel_size, inlets, outlets)


def obstacle_channel(width: int = 128, height: int = 48, pixel_size: float = 1e-5, v_inlet: float = 1e-3,
                     center=(0.3, 0.45), size: int = 8) -> ChannelMask:
    """Straight channel (walls at the raster border) with a square SOLID block."""
    fluid = np.ones((height, width), bool)
    ci = int(round(center[1] * height))
    cj = int(round(center[0] * width))
    fluid[ci - size // 2 : ci - size // 2 + size, cj - size // 2 : cj - size // 2 + size] = False
    return ChannelMask.from_array(
        fluid, pixel_size, [BoundarySegment("left", 0, height - 1, v_inlet)], [BoundarySegment("right", 0, height - 1)]
    )


def random_channel(rng: np.random.Generator, width: int = 64, height: int = 40, pixel_size: float = 1e-5,
                   v_inlet: float = 1e-3, n_blocks: int = 3) -> ChannelMask:
    """Straight channel with a few random rectangular SOLID blocks that never seal it off."""
    for _ in range(100):
        fluid = np.ones((height, width), bool)
        for _ in range(n_blocks):
            bh = int(rng.integers(height // 6, height // 2))
            bw = int(rng.integers(3, width // 6))
            i0 = int(rng.integers(0, height - bh))
            j0 = int(rng.integers(width // 8, width - width // 8 - bw))
            fluid[i0 : i0 + bh, j0 : j0 + bw] = False
        try:
            return ChannelMask.from_array(
                fluid, pixel_size, [BoundarySegment("left", 0, height - 1, v_inlet)],
                [BoundarySegment("right", 0, height - 1)],
            )
        except FlownavError:
            continue
    raise RuntimeError("could not draw a connected random channel")

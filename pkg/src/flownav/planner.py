"""Flow-aware A* over a node graph sampled from a flow field.

Edges are weighted by how much self-propulsion the robot needs to move along
them against (or with) the local current; travel times are measured with a
point-robot kinematic model following the planned waypoints.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import (
    EmptyGraph,
    InputError,
    NoPath,
    OutOfBounds,
    StartGoalUnmapped,
    Unreachable,
    ZeroLengthEdge,
)
from .grid import FlowField, sample_velocity


def edge_cost(x_cur, x_neig, v_cur, v_max: float) -> float:
    """``|dx| * |dx/|dx| - v_cur/v_max|``: zero when the current carries the
    robot along the edge at full speed, twice the length when it opposes it."""
    if not v_max > 0:
        raise InputError("v_max must be positive")
    d = np.asarray(x_neig, float) - np.asarray(x_cur, float)
    n = math.hypot(d[0], d[1])
    if n == 0.0:
        raise ZeroLengthEdge("edge endpoints coincide")
    ex = d[0] / n - v_cur[0] / v_max
    ey = d[1] / n - v_cur[1] / v_max
    return n * math.hypot(ex, ey)


def heuristic(x_cur, x_goal, v_cur, v_max: float) -> float:
    """Edge cost of the straight hop to the goal; 0 at the goal."""
    if not v_max > 0:
        raise InputError("v_max must be positive")
    if x_cur[0] == x_goal[0] and x_cur[1] == x_goal[1]:
        return 0.0
    return edge_cost(x_cur, x_goal, v_cur, v_max)


def _edge_costs(pos, vel, v_max, i, nbrs):
    d = pos[nbrs] - pos[i]
    n = np.hypot(d[:, 0], d[:, 1])
    if np.any(n == 0.0):
        raise ZeroLengthEdge("duplicate node positions")
    e = d / n[:, None] - vel[i] / v_max
    return n * np.hypot(e[:, 0], e[:, 1])


def supercover(p0, p1) -> list[tuple[int, int]]:
    """Pixels (row, col) whose closed square the segment p0-p1 touches.

    Points are in pixel units (x along columns, y along rows).  When the segment
    passes exactly through a pixel corner both side pixels are included."""
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    i, j = math.floor(y0), math.floor(x0)
    i1, j1 = math.floor(y1), math.floor(x1)
    dx, dy = x1 - x0, y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    t_dx = abs(1.0 / dx) if dx else math.inf
    t_dy = abs(1.0 / dy) if dy else math.inf
    t_x = ((j + (sx > 0)) - x0) / dx if dx else math.inf
    t_y = ((i + (sy > 0)) - y0) / dy if dy else math.inf
    cells = [(i, j)]
    for _ in range(abs(i1 - i) + abs(j1 - j) + 2):
        if (i, j) == (i1, j1):
            break
        if math.isfinite(t_x) and math.isfinite(t_y) and abs(t_x - t_y) <= 1e-12 * max(1.0, t_x):
            cells += [(i, j + sx), (i + sy, j)]
            i, j = i + sy, j + sx
            t_x += t_dx
            t_y += t_dy
        elif t_x < t_y:
            j += sx
            t_x += t_dx
        else:
            i += sy
            t_y += t_dy
        cells.append((i, j))
    return cells


def segment_clear(fluid: np.ndarray, p0, p1, pixel_size: float) -> bool:
    """True when the segment between two points (meters) crosses no SOLID pixel."""
    rows, cols = fluid.shape
    a = np.asarray(p0, float) / pixel_size
    b = np.asarray(p1, float) / pixel_size
    for i, j in supercover(a, b):
        if not (0 <= i < rows and 0 <= j < cols) or not fluid[i, j]:
            return False
    return True


@dataclass(frozen=True)
class FlowGraph:
    positions: np.ndarray
    velocities: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    v_max: float
    pixel_size: float | None = None
    stride: int = 1
    fluid: np.ndarray | None = None

    def __post_init__(self):
        if not self.v_max > 0:
            raise InputError("v_max must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def edges(self):
        for i in range(self.n_nodes):
            for j in self.neighbors(i):
                yield i, int(j)

    def cost_matrix(self) -> sparse.csr_matrix:
        """Directed edge-cost matrix (cost of i -> j uses the flow at i)."""
        data = np.concatenate(
            [_edge_costs(self.positions, self.velocities, self.v_max, i, self.neighbors(i)) for i in range(self.n_nodes)]
        ) if self.n_nodes else np.zeros(0)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes))

    def n_components(self) -> int:
        adj = sparse.csr_matrix((np.ones(self.indices.size), self.indices, self.indptr), shape=(self.n_nodes,) * 2)
        return csgraph.connected_components(adj, directed=False)[0]

    def nearest(self, pos) -> int:
        """Index of the node nearest ``pos``; it must lie within two strides."""
        d = np.hypot(*(self.positions - np.asarray(pos, float)).T)
        i = int(np.argmin(d))
        limit = 2.0 * self.stride * (self.pixel_size or 0.0)
        if self.pixel_size is not None and d[i] > limit:
            raise StartGoalUnmapped(f"no node within {limit:g} m of ({pos[0]:g}, {pos[1]:g})")
        return i

    def without_flow(self) -> "FlowGraph":
        return FlowGraph(self.positions, np.zeros_like(self.velocities), self.indptr, self.indices, self.v_max,
                         self.pixel_size, self.stride, self.fluid)

    @classmethod
    def from_nodes(cls, positions, velocities, v_max: float, k: int = 8, fluid=None, pixel_size=None,
                   stride: int = 1) -> "FlowGraph":
        """k-nearest adjacency, filtered by line of sight when ``fluid`` is given,
        then made symmetric."""
        pos = np.asarray(positions, float).reshape(-1, 2)
        vel = np.asarray(velocities, float).reshape(-1, 2)
        n = len(pos)
        if n == 0:
            raise EmptyGraph("no nodes")
        if k < 1:
            raise InputError("k must be at least 1")
        if fluid is not None and pixel_size is None:
            raise InputError("pixel_size is required for line-of-sight checks")
        pairs = set()
        if n > 1:
            kk = min(k + 1, n)
            _, idx = cKDTree(pos).query(pos, k=kk)
            for i in range(n):
                for j in np.atleast_1d(idx[i]):
                    j = int(j)
                    if j == i or j >= n:
                        continue
                    a, b = (i, j) if i < j else (j, i)
                    if (a, b) in pairs:
                        continue
                    if fluid is None or segment_clear(fluid, pos[a], pos[b], pixel_size):
                        pairs.add((a, b))
        rows = [a for a, b in pairs] + [b for a, b in pairs]
        cols = [b for a, b in pairs] + [a for a, b in pairs]
        adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        return cls(pos, vel, adj.indptr.astype(np.int64), adj.indices.astype(np.int64), float(v_max),
                   pixel_size, stride, None if fluid is None else np.asarray(fluid, bool))


def build_graph(field: FlowField, stride: int = 4, k: int = 8, v_max: float = 1e-3) -> FlowGraph:
    """Nodes at FLUID pixel centers on a lattice of pitch ``stride`` (offset by
    half a stride so the lattice sits inside the channel)."""
    if stride < 1:
        raise InputError("stride must be at least 1")
    fluid = field.fluid
    h = field.pixel_size
    off = stride // 2
    lattice = np.zeros_like(fluid)
    lattice[off::stride, off::stride] = True
    ii, jj = np.nonzero(fluid & lattice)
    if ii.size == 0:
        raise EmptyGraph("no FLUID pixel on the node lattice")
    pos = np.c_[(jj + 0.5) * h, (ii + 0.5) * h]
    vel = np.c_[field.vx[ii, jj], field.vy[ii, jj]]
    return FlowGraph.from_nodes(pos, vel, v_max, k, fluid, h, stride)


@dataclass
class PlanResult:
    path: np.ndarray
    total_cost: float
    expanded: int
    nodes: list[int]
    travel_time: float | None = None

    def to_json(self) -> dict:
        return {
            "path": [[float(x), float(y)] for x, y in self.path],
            "total_cost": float(self.total_cost),
            "travel_time_s": None if self.travel_time is None else float(self.travel_time),
            "expanded": int(self.expanded),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def astar(graph: FlowGraph, start, goal) -> PlanResult:
    """Best-first search on f = g + h.  Ties on f go to the smaller h, then to
    the smaller node index.  Closed nodes are never reopened."""
    s = graph.nearest(start)
    t = graph.nearest(goal)
    pos, vel, vm = graph.positions, graph.velocities, graph.v_max
    xg = pos[t]
    g = np.full(graph.n_nodes, np.inf)
    parent = np.full(graph.n_nodes, -1, dtype=np.int64)
    closed = np.zeros(graph.n_nodes, bool)
    g[s] = 0.0
    h0 = heuristic(pos[s], xg, vel[s], vm)
    heap = [(h0, h0, s)]
    expanded = 0
    while heap:
        _, _, i = heapq.heappop(heap)
        if closed[i]:
            continue
        closed[i] = True
        expanded += 1
        if i == t:
            break
        nbrs = graph.neighbors(i)
        costs = _edge_costs(pos, vel, vm, i, nbrs)
        for j, c in zip(nbrs, costs):
            j = int(j)
            if closed[j]:
                continue
            cand = g[i] + c
            if cand < g[j]:
                g[j] = cand
                parent[j] = i
                hj = heuristic(pos[j], xg, vel[j], vm)
                heapq.heappush(heap, (cand + hj, hj, j))
    if not closed[t]:
        raise NoPath("goal not reachable on the graph")
    nodes = [t]
    while nodes[-1] != s:
        nodes.append(int(parent[nodes[-1]]))
    nodes.reverse()
    return PlanResult(pos[nodes].copy(), float(g[t]), expanded, nodes)


def path_cost(graph: FlowGraph, nodes) -> float:
    """Sum of edge costs along a node sequence, accumulated from the start."""
    total = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        total += edge_cost(graph.positions[a], graph.positions[b], graph.velocities[a], graph.v_max)
    return total


def travel_time(path, field: FlowField, u_max: float, dt: float | None = None, radius: float | None = None,
                budget: float | None = None) -> float:
    """Time for a point robot to follow ``path`` at self-speed ``u_max``.

    The robot always heads straight for its current waypoint and is carried by
    the local flow.  Intermediate waypoints count as reached within ``radius``
    (default one pixel); the final one is reached exactly, interpolating within
    the last step.  Raises Unreachable when ``budget`` seconds run out or the
    robot is swept out of the field.
    """
    if not u_max > 0:
        raise InputError("u_max must be positive")
    path = np.asarray(path, float).reshape(-1, 2)
    if len(path) < 2:
        return 0.0
    h = field.pixel_size
    vpeak = float(np.max(field.speed())) if field.vx.size else 0.0
    if dt is None:
        dt = 0.25 * h / (u_max + vpeak)
    if not dt > 0:
        raise InputError("dt must be positive")
    radius = h if radius is None else radius
    length = float(np.sum(np.hypot(*np.diff(path, axis=0).T)))
    if budget is None:
        budget = 10.0 * length / u_max + 100.0 * dt
    x = path[0].copy()
    t = 0.0
    k = 1
    last = len(path) - 1
    while True:
        d = path[k] - x
        dist = math.hypot(d[0], d[1])
        if k < last and dist <= radius:
            k += 1
            continue
        if t > budget:
            raise Unreachable(f"waypoint {k} not reached within {budget:g} s")
        try:
            v = sample_velocity(field, x)
        except OutOfBounds as exc:
            raise Unreachable("robot swept out of the field") from exc
        head = d / dist if dist > 0 else np.zeros(2)
        ground = u_max * head + v
        if k == last:
            closing = float(ground @ head)
            if dist <= closing * dt:
                return t + dist / closing
        x = x + dt * ground
        t += dt


def smooth_path(path, iterations: int = 50, fluid=None, pixel_size: float | None = None,
                weight: float = 0.5) -> np.ndarray:
    """Move each interior waypoint part-way to the midpoint of its neighbours.

    Updates that would make either adjacent segment touch a SOLID pixel are
    rejected.  Endpoints stay fixed."""
    p = np.array(path, float).reshape(-1, 2)
    if len(p) < 3:
        raise InputError("smoothing needs at least 3 waypoints")
    if fluid is not None and pixel_size is None:
        raise InputError("pixel_size is required with fluid")
    for _ in range(iterations):
        moved = False
        for i in range(1, len(p) - 1):
            new = p[i] + weight * (0.5 * (p[i - 1] + p[i + 1]) - p[i])
            if np.array_equal(new, p[i]):
                continue
            if fluid is not None and not (
                segment_clear(fluid, p[i - 1], new, pixel_size) and segment_clear(fluid, new, p[i + 1], pixel_size)
            ):
                continue
            p[i] = new
            moved = True
        if not moved:
            break
    return p


def plan(field: FlowField, start, goal, v_max: float, stride: int = 4, k: int = 8, flow_aware: bool = True,
         u_max: float | None = None, dt: float | None = None) -> PlanResult:
    """Build the graph, search it and time the result under the real flow.

    With ``flow_aware=False`` the graph carries zero flow, so the search
    minimises plain Euclidean length."""
    graph = build_graph(field, stride, k, v_max)
    if not flow_aware:
        graph = graph.without_flow()
    res = astar(graph, start, goal)
    res.travel_time = travel_time(res.path, field, u_max or v_max, dt)
    return res


__all__ = [
    "edge_cost",
    "heuristic",
    "supercover",
    "segment_clear",
    "FlowGraph",
    "build_graph",
    "PlanResult",
    "astar",
    "path_cost",
    "travel_time",
    "smooth_path",
    "plan",
]

"""Closed-loop simulation of the robot under a flow field, plus tracking metrics."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from . import control
from .control import Gains, ObserverState, Reference, RobotState
from .errors import InputError, NonFinite, NotArrived, OutOfBounds
from .grid import FlowField, sample_velocity
from .planner import PlanResult, smooth_path


class ControllerVariant(enum.Enum):
    FF_FB_FLOW_COMP = "flow_comp"
    FF_FB_NO_COMP = "no_comp"
    FF_FB_OBSERVER = "observer"


class FlowSource:
    """Flow seen by the plant: either v = A x + c or a gridded field."""

    def __init__(self, A=None, c=None, field: FlowField | None = None):
        if (A is None) == (field is None):
            raise InputError("give either linear coefficients or a field")
        self.field = field
        self.A = None if A is None else np.array(A, float).reshape(2, 2)
        self.c = np.zeros(2) if c is None else np.array(c, float).reshape(2)

    @classmethod
    def linear(cls, A, c=None) -> "FlowSource":
        return cls(A=A, c=c)

    @classmethod
    def grid(cls, field: FlowField) -> "FlowSource":
        return cls(field=field)

    @property
    def kind(self) -> str:
        return "GRID" if self.field is not None else "ANALYTIC_LINEAR"

    def __call__(self, x) -> np.ndarray:
        if self.field is not None:
            return sample_velocity(self.field, x)
        return self.A @ np.asarray(x, float) + self.c

    def to_dict(self) -> dict:
        if self.field is not None:
            return {"kind": "GRID", "shape": list(self.field.shape), "pixel_size": self.field.pixel_size}
        return {"kind": "ANALYTIC_LINEAR", "A": self.A.tolist(), "c": self.c.tolist()}


ROTATION_FLOW = ((0.0, -0.2), (0.2, 0.0))

TRACE_COLUMNS = ["t", "x", "y", "xd", "yd", "ex", "ey", "u", "phi", "vtx", "vty", "vhx", "vhy"]


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    x_d: np.ndarray
    e: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    v_true: np.ndarray
    v_hat: np.ndarray
    dt: float
    arrival_time: float | None = None

    def __len__(self) -> int:
        return len(self.t)

    def rows(self):
        for k in range(len(self.t)):
            yield [self.t[k], *self.x[k], *self.x_d[k], *self.e[k], self.u[k], self.phi[k], *self.v_true[k],
                   *self.v_hat[k]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])


def simulate_tracking(variant: ControllerVariant, flow: FlowSource, gains: Gains | None = None, x0=None,
                      duration: float = 120.0, dt: float = 0.01, reference=None, v_hat0=(0.0, 0.0),
                      stop=None) -> SimTrace:
    """Integrate the robot with explicit Euler while the controller tracks ``reference``.

    ``reference`` maps t to a :class:`Reference` (default: the figure-eight).
    The plant always feels the true flow; the controller gets the true flow,
    zero, or the observer estimate depending on ``variant``.  The observer runs
    in every variant so its estimate is always recorded.  ``stop(x)`` returning
    True ends the run early at that sample."""
    variant = ControllerVariant(variant)
    gains = gains or Gains()
    if not (dt > 0 and duration > 0):
        raise InputError("duration and dt must be positive")
    if dt > duration * (1 + 1e-12):
        raise InputError("dt must not exceed duration")
    reference = reference or control.ref_lemniscate
    n = int(round(duration / dt))
    if abs(n * dt - duration) > 1e-9 * duration:
        n = int(math.floor(duration / dt))
    x = np.array(reference(0.0).x_d if x0 is None else x0, float)
    obs = ObserverState.start(x, gains.L_p, v_hat0)
    t = np.arange(n + 1) * dt
    xs = np.empty((n + 1, 2))
    xds = np.empty((n + 1, 2))
    us = np.empty(n + 1)
    phis = np.empty(n + 1)
    vts = np.empty((n + 1, 2))
    vhs = np.empty((n + 1, 2))
    prev_phi = 0.0
    for k in range(n + 1):
        ref = reference(t[k])
        try:
            v_true = flow(x)
        except OutOfBounds as exc:
            raise NotArrived("robot left the flow field") from exc
        if variant is ControllerVariant.FF_FB_FLOW_COMP:
            v_ctrl = v_true
        elif variant is ControllerVariant.FF_FB_NO_COMP:
            v_ctrl = np.zeros(2)
        else:
            v_ctrl = obs.v_hat
        inp = control.control_step(RobotState(x, t[k]), ref, v_ctrl, gains, prev_phi, dt)
        xs[k], xds[k], us[k], phis[k], vts[k], vhs[k] = x, ref.x_d, inp.u, inp.phi, v_true, obs.v_hat
        if k == n:
            break
        if stop is not None and stop(x):
            return _slice(SimTrace(t, xs, xds, xds - xs, us, phis, vts, vhs, dt), k + 1)
        obs = control.observer_step(obs, x, inp, dt)
        prev_phi = inp.phi
        x = x + dt * (inp.velocity() + v_true)
        if not np.all(np.isfinite(x)):
            raise NonFinite("robot state diverged")
    return SimTrace(t, xs, xds, xds - xs, us, phis, vts, vhs, dt)


def metrics(trace: SimTrace, eps: float | None = None) -> dict:
    """RMS error over the second half of the run, final error, settling time
    (first t after which |e| stays below ``eps``) and mean commanded speed."""
    if len(trace) == 0:
        raise InputError("empty trace")
    err = np.hypot(trace.e[:, 0], trace.e[:, 1])
    half = len(err) // 2
    rms = float(np.sqrt(np.mean(err[half:] ** 2)))
    out = {
        "rms_error": rms,
        "final_error": float(err[-1]),
        "mean_speed": float(np.mean(trace.u)),
    }
    if eps is not None:
        above = np.nonzero(err >= eps)[0]
        if above.size == 0:
            settle = float(trace.t[0])
        elif above[-1] == len(err) - 1:
            settle = None
        else:
            settle = float(trace.t[above[-1] + 1])
        out["settling_time"] = settle
        out["eps"] = eps
    if trace.arrival_time is not None:
        out["arrival_time"] = trace.arrival_time
    return out


def write_metrics(m: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)


def ground_speed(direction, v, u_max: float) -> float:
    """Largest speed along unit ``direction`` reachable with self-speed ``u_max``
    in flow ``v``; negative when the flow cannot be overcome."""
    along = float(direction @ v)
    cross = float(direction[0] * v[1] - direction[1] * v[0])
    if abs(cross) > u_max:
        return -1.0
    return along + math.sqrt(u_max * u_max - cross * cross)


class PathReference:
    """Moves along a polyline at the fastest speed the flow allows."""

    def __init__(self, path, flow: FlowSource, u_max: float, spacing: float, min_fraction: float = 0.05):
        path = np.asarray(path, float).reshape(-1, 2)
        seg = np.diff(path, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        keep = seg_len > 0
        pts = [path[0]]
        dirs = []
        for p0, d, L in zip(path[:-1][keep], seg[keep], seg_len[keep]):
            m = max(1, int(math.ceil(L / spacing)))
            for q in range(1, m + 1):
                pts.append(p0 + d * (q / m))
                dirs.append(d / L)
        self.points = np.array(pts)
        self.dirs = np.array(dirs).reshape(-1, 2)
        speeds = []
        for a, b, dvec in zip(self.points[:-1], self.points[1:], self.dirs):
            s = ground_speed(dvec, flow(0.5 * (a + b)), u_max)
            speeds.append(max(s, min_fraction * u_max))
        self.speeds = np.array(speeds)
        steps = np.hypot(*np.diff(self.points, axis=0).T) if len(self.points) > 1 else np.zeros(0)
        self.times = np.concatenate([[0.0], np.cumsum(steps / self.speeds)]) if steps.size else np.zeros(1)
        self.duration = float(self.times[-1])
        self.feasible = bool(np.all(np.array(speeds) > min_fraction * u_max)) if speeds else True

    def __call__(self, t: float) -> Reference:
        if t >= self.duration or len(self.points) < 2:
            return Reference(self.points[-1].copy(), np.zeros(2))
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        frac = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        pos = self.points[k] + frac * (self.points[k + 1] - self.points[k])
        return Reference(pos, self.dirs[k] * self.speeds[k])


def simulate_navigation(plan: PlanResult, flow: FlowSource, gains: Gains | None = None, u_max: float = 1e-3,
                        dt: float | None = None, variant=ControllerVariant.FF_FB_OBSERVER, pixel_size: float | None = None,
                        smooth_iters: int = 0, budget: float | None = None) -> SimTrace:
    """Track a planned path and stop once the robot is within two pixels of the goal.

    The reference moves along the (optionally smoothed) path at the ground
    speed reachable with self-speed ``u_max``.  The default ``dt`` moves the
    robot at most a quarter pixel per step.  Raises NotArrived when the goal is
    not reached within ``budget`` seconds (default: twice the reference
    duration plus ten seconds)."""
    path = np.asarray(plan.path, float).reshape(-1, 2)
    if len(path) == 0:
        raise InputError("empty plan")
    if pixel_size is None:
        if flow.field is None:
            raise InputError("pixel_size is required for an analytic flow")
        pixel_size = flow.field.pixel_size
    if smooth_iters and len(path) >= 3:
        fluid = None if flow.field is None else flow.field.fluid
        path = smooth_path(path, smooth_iters, fluid, pixel_size)
    gains = gains or Gains()
    if gains.u_max is None:
        gains = Gains(gains.K_p, gains.L_p, gains.k_f, u_max)
    ref = PathReference(path, flow, u_max, spacing=pixel_size)
    if dt is None:
        v_peak = max(float(np.hypot(*flow(p))) for p in ref.points)
        dt = 0.25 * pixel_size / (u_max + v_peak)
    if not dt > 0:
        raise InputError("dt must be positive")
    if budget is None:
        budget = 2.0 * ref.duration + 10.0
    goal = path[-1]
    radius = 2.0 * pixel_size
    if np.hypot(*(path[0] - goal)) <= radius:
        tr = simulate_tracking(variant, flow, gains, path[0], dt, dt, ref)
        tr.arrival_time = 0.0
        return tr
    tr = simulate_tracking(variant, flow, gains, path[0], budget, dt, ref,
                           stop=lambda x: math.hypot(x[0] - goal[0], x[1] - goal[1]) <= radius)
    hit = np.nonzero(np.hypot(*(tr.x - goal).T) <= radius)[0]
    if hit.size:
        out = _slice(tr, int(hit[0]) + 1)
        out.arrival_time = float(tr.t[hit[0]])
        return out
    raise NotArrived(f"goal not reached within {budget:g} s")


def _slice(tr: SimTrace, n: int) -> SimTrace:
    return SimTrace(tr.t[:n], tr.x[:n], tr.x_d[:n], tr.e[:n], tr.u[:n], tr.phi[:n], tr.v_true[:n], tr.v_hat[:n], tr.dt)


__all__ = [
    "ControllerVariant",
    "FlowSource",
    "ROTATION_FLOW",
    "SimTrace",
    "TRACE_COLUMNS",
    "simulate_tracking",
    "simulate_navigation",
    "metrics",
    "write_metrics",
    "ground_speed",
    "PathReference",
]

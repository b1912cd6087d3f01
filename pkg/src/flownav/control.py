"""Flow-compensated feedforward-feedback tracking and a flow disturbance observer.

The robot is a planar point with kinematics x' = u (cos phi, sin phi) + v(x):
it chooses a forward speed u >= 0 and a heading phi, and is carried by the
local flow v.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NonFinite


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class RobotState:
    x: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        x = np.array(self.x, float).reshape(2)
        if not np.all(np.isfinite(x)) or not math.isfinite(self.timestamp):
            raise NonFinite("robot state is not finite")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class ControlInput:
    u: float
    phi: float
    f_rot: float

    def velocity(self) -> np.ndarray:
        return self.u * np.array([math.cos(self.phi), math.sin(self.phi)])


@dataclass(frozen=True)
class Gains:
    K_p: float = 1.0
    L_p: np.ndarray = field(default_factory=lambda: np.eye(2))
    k_f: float = 1e-4
    u_max: float | None = None

    def __post_init__(self):
        if not self.K_p >= 0:
            raise InputError("K_p must be non-negative")
        L = np.array(self.L_p, float)
        if L.shape != (2, 2):
            raise InputError("L_p must be a 2x2 matrix")
        object.__setattr__(self, "L_p", L)
        if not self.k_f > 0:
            raise InputError("k_f must be positive")
        if self.u_max is not None and not self.u_max > 0:
            raise InputError("u_max must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "Gains":
        known = {"K_p", "L_p", "k_f", "u_max"}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown gain keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"K_p": self.K_p, "L_p": self.L_p.tolist(), "k_f": self.k_f, "u_max": self.u_max}


@dataclass(frozen=True)
class Reference:
    x_d: np.ndarray
    xdot_d: np.ndarray

    @property
    def phi_d(self) -> float:
        return math.atan2(self.xdot_d[1], self.xdot_d[0])


@dataclass(frozen=True)
class ObserverState:
    v_hat: np.ndarray
    x_hat: np.ndarray
    L_p: np.ndarray

    def __post_init__(self):
        for name in ("v_hat", "x_hat"):
            object.__setattr__(self, name, np.array(getattr(self, name), float).reshape(2))
        L = np.array(self.L_p, float).reshape(2, 2)
        object.__setattr__(self, "L_p", L)
        if np.min(np.linalg.eigvalsh(0.5 * (L + L.T))) <= 0 and np.any(L):
            warnings.warn("observer gain L_p is not positive definite; the flow estimate may not converge")

    @classmethod
    def start(cls, x0, L_p, v_hat0=(0.0, 0.0)) -> "ObserverState":
        return cls(np.asarray(v_hat0, float), np.asarray(x0, float), L_p)


def ref_lemniscate(t: float, period: float = 60.0, a: float = 1.8e-3, b: float = 1.5e-3) -> Reference:
    """Figure-eight reference; theta = 2 pi t / period.

    x = a cos(th) / (1 + sin^2 th),  y = b sin(th) cos(th) / (1 + sin^2 th)."""
    if not period > 0:
        raise InputError("period must be positive")
    w = 2.0 * math.pi / period
    th = math.fmod(w * t, 2.0 * math.pi)
    s, c = math.sin(th), math.cos(th)
    den = 1.0 + s * s
    x = a * c / den
    y = b * s * c / den
    # d/dth, then chain rule
    dden = 2.0 * s * c
    dx = a * (-s * den - c * dden) / den**2
    dy = b * ((c * c - s * s) * den - s * c * dden) / den**2
    return Reference(np.array([x, y]), w * np.array([dx, dy]))


def feedforward(xdot_d, v, fallback_phi: float = 0.0) -> tuple[float, float]:
    """Speed and heading that produce ``xdot_d`` once the flow ``v`` is added."""
    d = np.asarray(xdot_d, float) - np.asarray(v, float)
    u = math.hypot(d[0], d[1])
    if u == 0.0:
        return 0.0, fallback_phi
    return u, math.atan2(d[1], d[0])


def rotation_local(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, s], [-s, c]])


def tracking_error(x_d, x, v, dt: float, phi_d: float) -> tuple[np.ndarray, np.ndarray]:
    """Error to the reference after discounting one step of drift, in the world
    frame and in the frame of the reference heading."""
    if not dt > 0:
        raise InputError("dt must be positive")
    e = np.asarray(x_d, float) - np.asarray(x, float) - np.asarray(v, float) * dt
    return e, rotation_local(phi_d) @ e


def blend_heading(phi_ff: float, phi_fb: float, w_ff: float, w_fb: float) -> float:
    """Weighted average of two headings along the shorter arc between them."""
    total = w_ff + w_fb
    if total == 0.0:
        return wrap_angle(phi_ff)
    return wrap_angle(phi_ff + (w_fb / total) * wrap_angle(phi_fb - phi_ff))


def control_step(state: RobotState, ref: Reference, v_hat, gains: Gains, prev_phi: float, dt: float) -> ControlInput:
    """One feedforward-feedback update using the controller's flow estimate ``v_hat``."""
    u_ff, phi_ff = feedforward(ref.xdot_d, v_hat, prev_phi)
    e, e_loc = tracking_error(ref.x_d, state.x, v_hat, dt, ref.phi_d)
    phi_fb = math.atan2(e[1], e[0]) if np.any(e) else phi_ff
    phi = blend_heading(phi_ff, phi_fb, abs(e_loc[0]), abs(e_loc[1]))
    u_fb = gains.K_p * (e[0] * math.cos(phi) + e[1] * math.sin(phi))
    u = max(0.0, u_ff + u_fb)
    if gains.u_max is not None:
        u = min(u, gains.u_max)
    return ControlInput(u, phi, u / gains.k_f)


def observer_step(obs: ObserverState, x_meas, inp: ControlInput, dt: float) -> ObserverState:
    """Update the flow estimate from the latest position measurement.

    ``x_hat`` is the position the model predicted for this measurement.  The
    innovation corrects ``v_hat`` through ``L_p``; the model is then advanced
    from the measurement with the input about to be applied."""
    if not dt > 0:
        raise InputError("dt must be positive")
    x_meas = np.asarray(x_meas, float)
    v_hat = obs.v_hat + obs.L_p @ (x_meas - obs.x_hat)
    x_hat = x_meas + (inp.velocity() + v_hat) * dt
    if not (np.all(np.isfinite(v_hat)) and np.all(np.isfinite(x_hat))):
        raise NonFinite("observer update is not finite; reduce L_p or dt")
    return _fast_state(v_hat, x_hat, obs.L_p)


def _fast_state(v_hat, x_hat, L_p) -> ObserverState:
    # skip the gain check on every step; it ran when the state was created
    s = object.__new__(ObserverState)
    object.__setattr__(s, "v_hat", v_hat)
    object.__setattr__(s, "x_hat", x_hat)
    object.__setattr__(s, "L_p", L_p)
    return s


def observer_error_rates(L_p, dt: float | None = None) -> np.ndarray:
    """Decay rates (1/s) of the flow-estimate error for constant flow.

    Continuous time the error obeys e' = -L_p e; with ``dt`` the per-step map
    I - L_p dt is converted to an equivalent rate."""
    lam = np.linalg.eigvals(np.asarray(L_p, float))
    if dt is None:
        return np.sort(lam.real)
    return np.sort(-np.log(np.abs(1.0 - lam * dt)) / dt)


__all__ = [
    "wrap_angle",
    "RobotState",
    "ControlInput",
    "Gains",
    "Reference",
    "ObserverState",
    "ref_lemniscate",
    "feedforward",
    "tracking_error",
    "blend_heading",
    "control_step",
    "observer_step",
    "observer_error_rates",
]

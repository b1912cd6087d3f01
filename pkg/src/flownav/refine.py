"""Physics-informed refinement of a predicted flow field from sparse observations.

The field pixels themselves are the optimization variables.  The objective is
the weighted sum of squared continuity and momentum residuals, computed with
fixed finite-difference kernels; observed pixels and a band of pixels next to
walls are held fixed, so observations reach the rest of the field only through
the physics residual.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, InputError, ObsOutsideFluid
from .grid import FlowField, FluidProps, ObservationSet

# kernels exactly as used by the residual loss
K_D1 = np.array([-1.0, 0.0, 1.0]) / 2.0
K_D2 = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]]) / 4.0


def _axis(axis) -> int:
    if axis in ("x", 1):
        return 1
    if axis in ("y", 0):
        return 0
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def stencil_d1(m, axis) -> np.ndarray:
    """First difference in pixel units: ``K_D1`` correlated along ``axis``.

    Border pixels fall back to one-sided differences."""
    m = np.asarray(m, float)
    ax = _axis(axis)
    if m.shape[ax] < 3:
        raise InputError("stencil_d1 needs at least 3 pixels along the axis")
    m = np.moveaxis(m, ax, -1)
    out = np.empty_like(m)
    out[..., 1:-1] = K_D1[0] * m[..., :-2] + K_D1[2] * m[..., 2:]
    out[..., 0] = m[..., 1] - m[..., 0]
    out[..., -1] = m[..., -1] - m[..., -2]
    return np.moveaxis(out, -1, ax)


def stencil_d2(m) -> np.ndarray:
    """``K_D2`` correlated with the map (edge pixels replicated), i.e. -1/4 of
    the five-point Laplacian."""
    m = np.asarray(m, float)
    if min(m.shape) < 3:
        raise InputError("stencil_d2 needs a map of at least 3x3")
    return ndimage.correlate(m, K_D2, mode="nearest")


# adjoints of the interior stencils for seeds that vanish on the raster border


def _d1x_adj(g):
    out = np.zeros_like(g)
    out[:, 1:] += 0.5 * g[:, :-1]
    out[:, :-1] -= 0.5 * g[:, 1:]
    return out


def _d1y_adj(g):
    out = np.zeros_like(g)
    out[1:, :] += 0.5 * g[:-1, :]
    out[:-1, :] -= 0.5 * g[1:, :]
    return out


def _d2_adj(g):
    return ndimage.correlate(g, K_D2, mode="constant", cval=0.0)


@dataclass(frozen=True)
class ResidualMaps:
    r_cont: np.ndarray
    r_momx: np.ndarray
    r_momy: np.ndarray


def residual_region(fluid: np.ndarray) -> np.ndarray:
    """FLUID pixels whose four neighbours are FLUID and inside the raster."""
    fluid = np.asarray(fluid, bool)
    reg = np.zeros_like(fluid)
    c = fluid[1:-1, 1:-1]
    reg[1:-1, 1:-1] = c & fluid[:-2, 1:-1] & fluid[2:, 1:-1] & fluid[1:-1, :-2] & fluid[1:-1, 2:]
    return reg


def _raw_residuals(vx, vy, p, h, rho, mu, region):
    dxvx = stencil_d1(vx, "x") / h
    dyvx = stencil_d1(vx, "y") / h
    dxvy = stencil_d1(vy, "x") / h
    dyvy = stencil_d1(vy, "y") / h
    dxp = stencil_d1(p, "x") / h
    dyp = stencil_d1(p, "y") / h
    # K_D2 is -1/4 of the Laplacian
    lap_vx = -4.0 * stencil_d2(vx) / h**2
    lap_vy = -4.0 * stencil_d2(vy) / h**2
    r_c = np.where(region, dxvx + dyvy, 0.0)
    r_x = np.where(region, rho * (vx * dxvx + vy * dyvx) + dxp - mu * lap_vx, 0.0)
    r_y = np.where(region, rho * (vx * dxvy + vy * dyvy) + dyp - mu * lap_vy, 0.0)
    return r_c, r_x, r_y, (dxvx, dyvx, dxvy, dyvy)


def pde_residuals(field: FlowField, props: FluidProps | None = None) -> ResidualMaps:
    """Continuity and momentum residual maps in physical units (1/s and Pa/m),
    zero outside the FLUID interior."""
    props = props or field.props
    if field.mask_ref is not None and field.shape != field.mask_ref.shape:
        raise DimensionMismatch("field does not conform to its mask")
    region = residual_region(field.fluid)
    r_c, r_x, r_y, _ = _raw_residuals(field.vx, field.vy, field.p, field.pixel_size, props.rho, props.mu, region)
    return ResidualMaps(r_c, r_x, r_y)


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 20000
    step_size: float = 1e-2
    tol_loss: float = 1e-10
    boundary_band: int = 1
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    method: str = "lbfgs"
    memory: int = 10

    def __post_init__(self):
        if not self.step_size > 0:
            raise InputError("step_size must be positive")
        if self.boundary_band < 1:
            raise InputError("boundary_band must be at least 1")
        w = tuple(float(x) for x in self.loss_weights)
        if len(w) != 3 or min(w) < 0 or max(w) == 0:
            raise InputError("loss_weights must be three non-negative numbers, not all zero")
        object.__setattr__(self, "loss_weights", w)
        if self.method not in ("lbfgs", "gd"):
            raise InputError(f"unknown method {self.method!r}")
        if self.max_iters < 0:
            raise InputError("max_iters must be non-negative")


@dataclass
class RefineResult:
    field: FlowField
    history: list[tuple[int, float, float, float, float]]
    converged: bool = False
    step_failure: bool = False
    clamped: np.ndarray | None = None

    def __iter__(self):
        yield self.field
        yield self.history

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.history])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "r_cont", "r_momx", "r_momy"])
            for row in self.history:
                w.writerow([row[0], *(repr(float(x)) for x in row[1:])])


class Refiner(Protocol):
    def refine(self, initial: FlowField, obs: ObservationSet, props: FluidProps, cfg: RefineConfig) -> RefineResult: ...


def balanced_weights(field: FlowField, props: FluidProps | None = None) -> tuple[float, float, float]:
    """Loss weights that give the continuity term the units of the momentum terms.

    Continuity residuals are multiplied by mu/h + rho*U (U the peak speed), the
    factor relating a velocity-gradient error to a momentum-balance error."""
    props = props or field.props
    u = float(np.max(np.hypot(field.vx, field.vy)))
    w = props.mu / field.pixel_size + props.rho * u
    return (w * w, 1.0, 1.0)


def boundary_band_mask(fluid: np.ndarray, band: int) -> np.ndarray:
    """FLUID pixels within ``band`` pixels (chessboard) of SOLID or of the raster edge."""
    padded = np.pad(np.asarray(fluid, bool), band, constant_values=False)
    dist = ndimage.distance_transform_cdt(padded, metric="chessboard")[band:-band, band:-band]
    return np.asarray(fluid, bool) & (dist <= band)


def observation_pixels(field: FlowField, obs: ObservationSet):
    """Nearest-pixel assignment; several observations in one pixel are averaged."""
    fluid = field.fluid
    h = field.pixel_size
    rows, cols = field.shape
    sums: dict[tuple[int, int], list] = {}
    for pos, vel in zip(obs.positions, obs.velocities):
        j = int(np.floor(pos[0] / h))
        i = int(np.floor(pos[1] / h))
        if not (0 <= i < rows and 0 <= j < cols) or not fluid[i, j]:
            raise ObsOutsideFluid(f"observation at ({pos[0]:g}, {pos[1]:g}) is not inside a FLUID pixel")
        acc = sums.setdefault((i, j), [np.zeros(2), 0])
        acc[0] = acc[0] + vel
        acc[1] += 1
    return {k: v[0] / v[1] for k, v in sums.items()}


class ResidualObjective:
    """Scaled residual loss over the free pixels of a field and its exact gradient."""

    def __init__(self, template: FlowField, props: FluidProps, weights, free_v: np.ndarray, free_p: np.ndarray):
        self.template = template
        self.h = template.pixel_size
        self.rho, self.mu = props.rho, props.mu
        self.region = residual_region(template.fluid)
        self.free_v = free_v
        self.free_p = free_p
        self.w = np.asarray(weights, float)
        u = float(np.max(np.hypot(template.vx, template.vy)))
        self.u_scale = u if u > 0 else 1.0
        self.force_scale = self.mu * self.u_scale / self.h**2 + self.rho * self.u_scale**2 / self.h
        self.p_scale = self.force_scale * self.h
        # the optimizer sees L / force_scale**2; reported losses are physical
        self.l_scale = self.force_scale**2
        self.nv = int(free_v.sum())
        self.np_ = int(free_p.sum())

    def pack(self, vx, vy, p) -> np.ndarray:
        return np.concatenate(
            [vx[self.free_v] / self.u_scale, vy[self.free_v] / self.u_scale, p[self.free_p] / self.p_scale]
        )

    def unpack(self, x):
        vx = np.array(self.template.vx)
        vy = np.array(self.template.vy)
        p = np.array(self.template.p)
        nv = self.nv
        vx[self.free_v] = x[:nv] * self.u_scale
        vy[self.free_v] = x[nv : 2 * nv] * self.u_scale
        p[self.free_p] = x[2 * nv :] * self.p_scale
        return vx, vy, p

    def terms(self, vx, vy, p):
        r_c, r_x, r_y, derivs = _raw_residuals(vx, vy, p, self.h, self.rho, self.mu, self.region)
        lc = self.w[0] * float(np.sum(r_c**2))
        lx = self.w[1] * float(np.sum(r_x**2))
        ly = self.w[2] * float(np.sum(r_y**2))
        return (lc, lx, ly), (r_c, r_x, r_y), derivs

    def __call__(self, x, with_grad=True):
        vx, vy, p = self.unpack(x)
        (lc, lx, ly), (r_c, r_x, r_y), (dxvx, dyvx, dxvy, dyvy) = self.terms(vx, vy, p)
        loss = (lc + lx + ly) / self.l_scale
        if not with_grad:
            return loss, (lc, lx, ly), None
        h, rho, mu = self.h, self.rho, self.mu
        gc = 2.0 * self.w[0] * r_c / self.l_scale
        gx = 2.0 * self.w[1] * r_x / self.l_scale
        gy = 2.0 * self.w[2] * r_y / self.l_scale

        def dxt(g):
            return _d1x_adj(g) / h

        def dyt(g):
            return _d1y_adj(g) / h

        def lapt(g):
            return -4.0 * _d2_adj(g) / h**2

        g_vx = dxt(gc) + rho * (gx * dxvx + dxt(vx * gx) + dyt(vy * gx)) - mu * lapt(gx) + rho * gy * dxvy
        g_vy = dyt(gc) + rho * gx * dyvx + rho * (dxt(vx * gy) + gy * dyvy + dyt(vy * gy)) - mu * lapt(gy)
        g_p = dxt(gx) + dyt(gy)
        grad = np.concatenate(
            [g_vx[self.free_v] * self.u_scale, g_vy[self.free_v] * self.u_scale, g_p[self.free_p] * self.p_scale]
        )
        return loss, (lc, lx, ly), grad


def _outlet_pin(field: FlowField):
    mask = field.mask_ref
    if mask is None:
        return None
    seg = mask.outlets[0]
    return seg.pixels(mask.height, mask.width)[seg.length // 2]


def setup_problem(initial: FlowField, obs: ObservationSet, props: FluidProps, cfg: RefineConfig):
    """Apply the hard constraints and build the objective.  Returns the clamped
    starting field and the objective."""
    fluid = initial.fluid
    clamp = boundary_band_mask(fluid, cfg.boundary_band)
    vx = np.array(initial.vx)
    vy = np.array(initial.vy)
    for (i, j), vel in observation_pixels(initial, obs).items():
        vx[i, j], vy[i, j] = vel
        clamp[i, j] = True
    free_v = fluid & ~clamp
    free_p = np.array(fluid)
    pin = _outlet_pin(initial)
    if pin is not None:
        free_p[pin] = False
    start = initial.replace(vx=vx, vy=vy)
    objective = ResidualObjective(start, props, cfg.loss_weights, free_v, free_p)
    return start, objective, clamp | ~fluid


def _armijo(fun, x, f0, g0, d, a0, c1=1e-4, max_halvings=60):
    slope = float(g0 @ d)
    if not slope < 0:
        return None
    a = a0
    for _ in range(max_halvings):
        x_new = x + a * d
        f_new, parts, g_new = fun(x_new)
        if np.isfinite(f_new) and f_new <= f0 + c1 * a * slope:
            return a, x_new, f_new, parts, g_new
        a *= 0.5
    return None


def refine_field(initial: FlowField, obs: ObservationSet | None = None, props: FluidProps | None = None,
                 cfg: RefineConfig | None = None) -> RefineResult:
    """Minimize the residual loss over the free pixels of ``initial``.

    The returned history has one ``(iter, loss, l_cont, l_momx, l_momy)`` row per
    accepted step (row 0 is the clamped start) and never increases."""
    props = props or initial.props
    cfg = cfg or RefineConfig()
    obs = obs if obs is not None else ObservationSet.empty()
    start, objective, fixed = setup_problem(initial, obs, props, cfg)

    x = objective.pack(start.vx, start.vy, start.p)
    f, parts, g = objective(x)
    history = [(0, sum(parts), *parts)]
    converged = step_failure = False
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    step = cfg.step_size
    if x.size == 0 or f == 0.0 or not np.any(g):
        converged = True
    for it in range(1, cfg.max_iters + 1):
        if converged:
            break
        if cfg.method == "lbfgs" and s_hist:
            d = _two_loop(g, s_hist, y_hist)
            a0 = 1.0
        else:
            d = -g
            a0 = step if cfg.method == "gd" else cfg.step_size / max(float(np.max(np.abs(g))), 1e-300)
        res = _armijo(objective, x, f, g, d, a0)
        if res is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            res = _armijo(objective, x, f, g, -g, cfg.step_size / max(float(np.max(np.abs(g))), 1e-300))
        if res is None:
            step_failure = True
            break
        a, x_new, f_new, parts, g_new = res
        if cfg.method == "gd":
            step = 2.0 * a
        else:
            s, yv = x_new - x, g_new - g
            if float(s @ yv) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
                s_hist.append(s)
                y_hist.append(yv)
                if len(s_hist) > cfg.memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
        decrease = (f - f_new) / f if f > 0 else 0.0
        x, f, g = x_new, f_new, g_new
        history.append((it, sum(parts), *parts))
        if f == 0.0 or decrease < cfg.tol_loss or not np.any(g):
            converged = True
    if step_failure:
        warnings.warn("STEP_FAILURE: line search could not decrease the loss; returning best iterate")
    vx, vy, p = objective.unpack(x)
    refined = initial.replace(vx=vx, vy=vy, p=p, props=props)
    return RefineResult(refined, history, converged, step_failure, fixed)


def _two_loop(g, s_hist, y_hist):
    q = np.array(g)
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


class PixelRefiner:
    """Default refiner: direct optimization of the field pixels."""

    def refine(self, initial, obs, props, cfg) -> RefineResult:
        return refine_field(initial, obs, props, cfg)


def rmse(field: FlowField, truth: FlowField, where: np.ndarray | None = None) -> float:
    """Root-mean-square velocity-vector error over ``where`` (default: FLUID)."""
    where = truth.fluid if where is None else where
    err = (field.vx - truth.vx) ** 2 + (field.vy - truth.vy) ** 2
    return float(np.sqrt(np.mean(err[where])))


__all__ = [
    "K_D1",
    "K_D2",
    "stencil_d1",
    "stencil_d2",
    "ResidualMaps",
    "pde_residuals",
    "RefineConfig",
    "RefineResult",
    "Refiner",
    "PixelRefiner",
    "refine_field",
    "ResidualObjective",
    "setup_problem",
    "residual_region",
    "boundary_band_mask",
    "balanced_weights",
    "observation_pixels",
    "rmse",
]


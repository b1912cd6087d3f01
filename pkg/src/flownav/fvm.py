"""Steady incompressible flow on a pixel mask: SIMPLE on a staggered grid.

Pressure lives at pixel centers; ``u`` on vertical faces, shape (H, W+1), and
``v`` on horizontal faces, shape (H+1, W).  Momentum uses first-order upwind
convection and central diffusion with dynamic viscosity ``rho * nu``.  The
v-equation is assembled by running the u-assembly on transposed arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, Diverged, InputError
from .grid import ChannelMask, FlowField, FluidProps

WALL, INLET, OUTLET = 0, 1, 2


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 5000
    tol_continuity: float = 1e-6
    tol_momentum: float = 1e-5
    relax_u: float = 0.7
    relax_p: float = 0.3
    convection_scheme: str = "UPWIND"

    def __post_init__(self):
        if not (0 < self.relax_u <= 1 and 0 < self.relax_p <= 1):
            raise InputError("relaxation factors must lie in (0, 1]")
        if not (self.tol_continuity > 0 and self.tol_momentum > 0):
            raise InputError("tolerances must be positive")
        if self.max_outer_iters < 1:
            raise InputError("max_outer_iters must be at least 1")
        if self.convection_scheme != "UPWIND":
            raise InputError(f"unsupported convection scheme {self.convection_scheme!r}")


@dataclass
class ResidualReport:
    continuity_l2: list[float] = field(default_factory=list)
    momentum_x_l2: list[float] = field(default_factory=list)
    momentum_y_l2: list[float] = field(default_factory=list)
    iters_used: int = 0
    converged: bool = False

    @property
    def final(self) -> tuple[float, float, float]:
        return self.continuity_l2[-1], self.momentum_x_l2[-1], self.momentum_y_l2[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "continuity", "momx", "momy"])
            for k, row in enumerate(zip(self.continuity_l2, self.momentum_x_l2, self.momentum_y_l2), start=1):
                w.writerow([k, *(repr(float(r)) for r in row)])


def parabolic_cell_means(n: int, mean: float) -> np.ndarray:
    """Per-pixel averages of 6*mean*s*(1-s) over ``n`` equal pixels; they sum to n*mean."""
    edges = np.linspace(0.0, 1.0, n + 1)
    prim = 6.0 * mean * (edges**2 / 2.0 - edges**3 / 3.0)
    return np.diff(prim) * n


@dataclass
class _Boundaries:
    """Per-edge kinds and prescribed normal face velocity (signed, +x / +y)."""

    kind: dict
    value: dict
    inlet_flux: float
    ref_cell: tuple[int, int]
    outlet_cells: list


def _boundaries(mask: ChannelMask) -> _Boundaries:
    h_, w_ = mask.shape
    kind = {"left": np.zeros(h_, int), "right": np.zeros(h_, int), "top": np.zeros(w_, int), "bottom": np.zeros(w_, int)}
    value = {k: np.zeros_like(a, dtype=float) for k, a in kind.items()}
    q_in = 0.0
    for seg in mask.inlets:
        prof = parabolic_cell_means(seg.length, seg.v_inlet)
        sign = sum(seg.inward)
        kind[seg.edge][seg.start : seg.stop + 1] = INLET
        value[seg.edge][seg.start : seg.stop + 1] = sign * prof
        q_in += prof.sum() * mask.pixel_size
    outlet_cells = []
    for seg in mask.outlets:
        kind[seg.edge][seg.start : seg.stop + 1] = OUTLET
        outlet_cells.extend((seg.edge, i, j) for i, j in seg.pixels(h_, w_))
    seg = mask.outlets[0]
    ref = seg.pixels(h_, w_)[seg.length // 2]
    return _Boundaries(kind, value, q_in, ref, outlet_cells)


def _active_faces(fluid: np.ndarray) -> np.ndarray:
    rows, cols = fluid.shape
    act = np.zeros((rows, cols + 1), bool)
    act[:, 1:cols] = fluid[:, :-1] & fluid[:, 1:]
    return act


def _momentum(un, ut, p, fluid, t_lo, t_hi, h, rho, mu, alpha, solve=True):
    """Assemble and (optionally) solve the momentum equation for the component
    normal to columns.  ``un`` holds boundary values on inactive faces.

    Returns (new un, d coefficients, unrelaxed residual vector, a_P * u_P)."""
    rows, cols = fluid.shape
    act = _active_faces(fluid)
    ii, jj = np.nonzero(act)
    n = len(ii)
    idx = -np.ones(act.shape, int)
    idx[ii, jj] = np.arange(n)
    if n == 0:
        return un.copy(), np.zeros_like(un), np.zeros(0), np.zeros(0)

    u_p = un[ii, jj]
    fe = 0.5 * rho * h * (un[ii, jj] + un[ii, jj + 1])
    fw = 0.5 * rho * h * (un[ii, jj - 1] + un[ii, jj])
    ft = 0.5 * rho * h * (ut[ii, jj - 1] + ut[ii, jj])
    fb = 0.5 * rho * h * (ut[ii + 1, jj - 1] + ut[ii + 1, jj])

    rows_l, cols_l, vals_l = [np.arange(n)], [np.arange(n)], [None]
    src = h * (p[ii, jj - 1] - p[ii, jj])
    a_sum = np.zeros(n)
    off_sum = np.zeros(n)  # sum a_nb * u_nb over all neighbors (for residual)

    def link(coef, nb_i, nb_j, nb_active, fixed_val):
        nonlocal src, a_sum, off_sum
        a_sum = a_sum + coef
        k = np.nonzero(nb_active)[0]
        rows_l.append(k)
        cols_l.append(idx[nb_i[k], nb_j[k]])
        vals_l.append(-coef[k])
        nb_val = np.where(nb_active, un[np.clip(nb_i, 0, rows - 1), nb_j], fixed_val)
        off_sum = off_sum + coef * nb_val
        fixed = ~nb_active
        src = src + np.where(fixed, coef * fixed_val, 0.0)

    # x-neighbours are always face nodes at distance h; inactive ones carry their BC value
    link(mu + np.maximum(-fe, 0.0), ii, jj + 1, act[ii, jj + 1], un[ii, jj + 1])
    link(mu + np.maximum(fw, 0.0), ii, jj - 1, act[ii, jj - 1], un[ii, jj - 1])

    # y-neighbours: wall half a cell away, corner node at distance h, or outlet (zero gradient)
    for side, flux_in, nb in (("lo", np.maximum(ft, 0.0), ii - 1), ("hi", np.maximum(-fb, 0.0), ii + 1)):
        inside = (nb >= 0) & (nb < rows)
        nbc = np.clip(nb, 0, rows - 1)
        nb_act = inside & act[nbc, jj]
        n_fluid = np.where(inside, fluid[nbc, jj - 1].astype(int) + fluid[nbc, jj], 0)
        diff = np.where(nb_act, mu, np.where(n_fluid == 0, 2.0 * mu, mu))
        fixed_val = np.zeros(n)
        edge_kind = t_lo if side == "lo" else t_hi
        on_edge = ~inside
        out_edge = on_edge & (edge_kind[jj - 1] == OUTLET) & (edge_kind[jj] == OUTLET)
        diff = np.where(out_edge, 0.0, diff)
        fixed_val = np.where(out_edge, u_p, fixed_val)
        link(diff + flux_in, nb, jj, nb_act, fixed_val)

    a_p = a_sum + (fe - fw + fb - ft)
    resid = a_p * u_p - off_sum - h * (p[ii, jj - 1] - p[ii, jj])
    au = a_p * u_p
    out = un.copy()
    d = np.zeros_like(un)
    if solve:
        a_relaxed = a_p / alpha
        vals_l[0] = a_relaxed
        src = src + (1.0 - alpha) * a_relaxed * u_p
        mat = sp.csr_matrix(
            (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))), shape=(n, n)
        )
        out[ii, jj] = _solve_momentum(mat, src, u_p)
        d[ii, jj] = h / a_relaxed
    return out, d, resid, au


def _solve_momentum(mat, rhs, x0):
    # diagonally dominant after under-relaxation: Jacobi-preconditioned BiCGSTAB is enough
    inv_diag = 1.0 / mat.diagonal()
    prec = spla.LinearOperator(mat.shape, matvec=lambda r: inv_diag * r)
    x, info = spla.bicgstab(mat, rhs, x0=x0, rtol=1e-12, atol=0.0, maxiter=2000, M=prec)
    if info != 0:
        x = spla.spsolve(mat.tocsc(), rhs, permc_spec="MMD_AT_PLUS_A")
    return x


class _Staggered:
    """Mutable SIMPLE state for one mask."""

    def __init__(self, mask: ChannelMask, props: FluidProps):
        self.mask = mask
        self.props = props
        self.h = mask.pixel_size
        self.fluid = np.array(mask.active)
        self.bc = _boundaries(mask)
        rows, cols = mask.shape
        self.u = np.zeros((rows, cols + 1))
        self.v = np.zeros((rows + 1, cols))
        self.p = np.zeros((rows, cols))
        self.u[:, 0] = self.bc.value["left"]
        self.u[:, cols] = self.bc.value["right"]
        self.v[0, :] = self.bc.value["top"]
        self.v[rows, :] = self.bc.value["bottom"]
        self.act_u = _active_faces(self.fluid)
        self.act_v = _active_faces(self.fluid.T).T
        self._p_lu = None
        self._p_lu_age = 0
        self.apply_outlets()

    # outlet faces copy their upstream neighbour, then get scaled to match inflow
    def _outlet_faces(self):
        rows, cols = self.mask.shape
        faces = []
        for edge, i, j in self.bc.outlet_cells:
            if edge == "left":
                faces.append((self.u, (i, 0), (i, 1), self.act_u[i, 1], -1.0))
            elif edge == "right":
                faces.append((self.u, (i, cols), (i, cols - 1), self.act_u[i, cols - 1], 1.0))
            elif edge == "top":
                faces.append((self.v, (0, j), (1, j), self.act_v[1, j], -1.0))
            else:
                faces.append((self.v, (rows, j), (rows - 1, j), self.act_v[rows - 1, j], 1.0))
        return faces

    def apply_outlets(self):
        faces = self._outlet_faces()
        for arr, face, up, up_active, _ in faces:
            arr[face] = arr[up] if up_active else 0.0
        q_out = sum(sign * arr[face] for arr, face, _, _, sign in faces) * self.h
        q_in = self.bc.inlet_flux
        if q_out > 1e-12 * max(q_in, 1e-300):
            scale = q_in / q_out
            for arr, face, _, _, _ in faces:
                arr[face] *= scale
        else:
            each = q_in / (len(faces) * self.h)
            for arr, face, _, _, sign in faces:
                arr[face] = sign * each

    def momentum(self, alpha, solve=True):
        rho, mu, h = self.props.rho, self.props.mu, self.h
        k = self.bc.kind
        u_new, du, ru, au = _momentum(self.u, self.v, self.p, self.fluid, k["top"], k["bottom"], h, rho, mu, alpha, solve)
        v_new_t, dv_t, rv, av = _momentum(
            self.v.T, self.u.T, self.p.T, self.fluid.T, k["left"], k["right"], h, rho, mu, alpha, solve
        )
        return u_new, du, ru, au, v_new_t.T, dv_t.T, rv, av

    def mass_imbalance(self, u, v) -> np.ndarray:
        """Net volumetric inflow per cell (m^2/s per unit depth), zero outside the solved component."""
        b = self.h * (u[:, :-1] - u[:, 1:] + v[:-1, :] - v[1:, :])
        return np.where(self.fluid, b, 0.0)

    def pressure_correction(self, du, dv, b):
        rows, cols = self.mask.shape
        rho, h = self.props.rho, self.h
        cells = np.nonzero(self.fluid)
        n = len(cells[0])
        idx = -np.ones((rows, cols), int)
        idx[cells] = np.arange(n)
        ci, cj = cells
        diag = np.zeros(n)
        r_list, c_list, v_list = [], [], []
        links = (
            (self.act_u[ci, cj], du[ci, cj], ci, cj - 1),
            (self.act_u[ci, cj + 1], du[ci, cj + 1], ci, cj + 1),
            (self.act_v[ci, cj], dv[ci, cj], ci - 1, cj),
            (self.act_v[ci + 1, cj], dv[ci + 1, cj], ci + 1, cj),
        )
        for active, d, ni, nj in links:
            coef = np.where(active, rho * d * h, 0.0)
            diag += coef
            k = np.nonzero(active)[0]
            r_list.append(k)
            c_list.append(idx[ni[k], nj[k]])
            v_list.append(-coef[k])
        rhs = rho * b[ci, cj]
        ref = idx[self.bc.ref_cell]
        keep = [(r != ref) for r in r_list]
        r_list = [r[m] for r, m in zip(r_list, keep)]
        c_list = [c[m] for c, m in zip(c_list, keep)]
        v_list = [v[m] for v, m in zip(v_list, keep)]
        diag[ref] = 1.0
        rhs[ref] = 0.0
        diag = np.where(diag == 0.0, 1.0, diag)
        mat = sp.csr_matrix(
            (np.concatenate([diag, *v_list]), (np.concatenate([np.arange(n), *r_list]), np.concatenate([np.arange(n), *c_list]))),
            shape=(n, n),
        )
        pc = np.zeros((rows, cols))
        pc[cells] = self._solve_pressure(mat.tocsc(), rhs)
        return pc

    def _solve_pressure(self, mat, rhs):
        # d changes slowly between outer iterations, so an old factorization
        # preconditions the new system well; refactor when it stops doing so
        if self._p_lu is not None and self._p_lu_age < 25:
            counter = [0]

            def count(_):
                counter[0] += 1

            prec = spla.LinearOperator(mat.shape, matvec=self._p_lu.solve)
            x, info = spla.bicgstab(mat, rhs, rtol=1e-12, atol=0.0, maxiter=30, M=prec, callback=count)
            if info == 0:
                self._p_lu_age += 1 if counter[0] < 8 else 5
                return x
        self._p_lu = spla.splu(mat, permc_spec="MMD_AT_PLUS_A")
        self._p_lu_age = 0
        return self._p_lu.solve(rhs)

    def collocated(self) -> FlowField:
        rows, cols = self.mask.shape
        vx = 0.5 * (self.u[:, :-1] + self.u[:, 1:])
        vy = 0.5 * (self.v[:-1, :] + self.v[1:, :])
        for seg in self.mask.inlets:
            for i, j in seg.pixels(rows, cols):
                if seg.edge == "left":
                    vx[i, j] = self.u[i, 0]
                elif seg.edge == "right":
                    vx[i, j] = self.u[i, cols]
                elif seg.edge == "top":
                    vy[i, j] = self.v[0, j]
                else:
                    vy[i, j] = self.v[rows, j]
        vx = np.where(self.fluid, vx, 0.0)
        vy = np.where(self.fluid, vy, 0.0)
        p = np.where(self.fluid, self.p - self.p[self.bc.ref_cell], 0.0)
        return FlowField(vx, vy, p, self.mask, self.props, faces=(self.u.copy(), self.v.copy()))

    def load_collocated(self, field: FlowField) -> None:
        """Reconstruct staggered faces from a collocated field by linear interpolation,
        or reuse the faces a solver attached to it."""
        rows, cols = self.mask.shape
        if field.faces is not None and field.faces[0].shape == (rows, cols + 1) and field.faces[1].shape == (rows + 1, cols):
            self.u, self.v = field.faces[0].copy(), field.faces[1].copy()
            self.p = np.where(self.fluid, field.p, 0.0)
            return
        vx = np.where(self.fluid, field.vx, 0.0)
        vy = np.where(self.fluid, field.vy, 0.0)
        u = np.zeros((rows, cols + 1))
        u[:, 1:cols] = np.where(self.act_u[:, 1:cols], 0.5 * (vx[:, :-1] + vx[:, 1:]), 0.0)
        v = np.zeros((rows + 1, cols))
        v[1:rows, :] = np.where(self.act_v[1:rows, :], 0.5 * (vy[:-1, :] + vy[1:, :]), 0.0)
        u[:, 0] = self.bc.value["left"]
        u[:, cols] = self.bc.value["right"]
        v[0, :] = self.bc.value["top"]
        v[rows, :] = self.bc.value["bottom"]
        for edge, i, j in self.bc.outlet_cells:
            if edge == "left":
                u[i, 0] = vx[i, j]
            elif edge == "right":
                u[i, cols] = vx[i, j]
            elif edge == "top":
                v[0, j] = vy[i, j]
            else:
                v[rows, j] = vy[i, j]
        self.u, self.v = u, v
        self.p = np.where(self.fluid, field.p, 0.0)

    def norms(self, b, ru, au, rv, av):
        """Continuity: L2 of per-cell imbalance over the inflow rate.  Momentum:
        RMS per-face imbalance over the force scale mu*U + rho*U^2*h."""
        q = max(self.bc.inlet_flux, 1e-300)
        width = sum(s.length for s in self.mask.inlets) * self.h
        u_ref = q / width
        force = self.props.mu * u_ref + self.props.rho * u_ref**2 * self.h
        cont = float(np.linalg.norm(b) / q)

        def rms(r):
            return float(np.sqrt(np.mean(r**2)) / force) if len(r) else 0.0

        return cont, rms(ru), rms(rv)


def solve_steady(
    mask: ChannelMask, props: FluidProps | None = None, cfg: SolverConfig | None = None, callback=None
) -> tuple[FlowField, ResidualReport]:
    """Run SIMPLE until the continuity residual is below ``cfg.tol_continuity``
    and both momentum residuals are below ``cfg.tol_momentum``.

    Raises :class:`Diverged` when a residual blows up past 1e6 times its first
    value; hitting ``max_outer_iters`` only clears ``report.converged``.
    """
    props = props or FluidProps()
    cfg = cfg or SolverConfig()
    st = _Staggered(mask, props)
    report = ResidualReport()
    first = [0.0, 0.0, 0.0]
    for it in range(1, cfg.max_outer_iters + 1):
        u_star, du, ru, au, v_star, dv, rv, av = st.momentum(cfg.relax_u)
        st.u, st.v = u_star, v_star
        st.apply_outlets()
        b = st.mass_imbalance(st.u, st.v)
        norms = st.norms(b, ru, au, rv, av)
        report.continuity_l2.append(norms[0])
        report.momentum_x_l2.append(norms[1])
        report.momentum_y_l2.append(norms[2])
        report.iters_used = it
        if not all(np.isfinite(norms)):
            raise Diverged(f"non-finite residual at iteration {it}")
        first = [f0 if f0 > 0 else x for f0, x in zip(first, norms)]
        if any(f0 > 0 and x > 1e6 * f0 for x, f0 in zip(norms, first)):
            raise Diverged(f"residual grew past 1e6x its initial value at iteration {it}")
        pc = st.pressure_correction(du, dv, b)
        st.u[:, 1:-1] += np.where(st.act_u[:, 1:-1], du[:, 1:-1] * (pc[:, :-1] - pc[:, 1:]), 0.0)
        st.v[1:-1, :] += np.where(st.act_v[1:-1, :], dv[1:-1, :] * (pc[:-1, :] - pc[1:, :]), 0.0)
        st.p += cfg.relax_p * pc
        if not (np.all(np.isfinite(st.u)) and np.all(np.isfinite(st.v)) and np.all(np.isfinite(st.p))):
            raise Diverged(f"non-finite field at iteration {it}")
        if callback is not None:
            callback(it, norms)
        if norms[0] <= cfg.tol_continuity and max(norms[1], norms[2]) <= cfg.tol_momentum:
            report.converged = True
            break
    return st.collocated(), report


def algebraic_residual(field: FlowField, mask: ChannelMask, props: FluidProps | None = None) -> ResidualReport:
    """Evaluate the discrete continuity and momentum equations at ``field``.

    Faces are rebuilt by averaging neighbouring pixels; inlet faces take the
    prescribed profile and outlet faces the adjacent pixel value."""
    if field.shape != mask.shape:
        raise DimensionMismatch(f"field {field.shape} does not match mask {mask.shape}")
    props = props or field.props
    st = _Staggered(mask, props)
    st.load_collocated(field)
    _, _, ru, au, _, _, rv, av = st.momentum(1.0, solve=False)
    b = st.mass_imbalance(st.u, st.v)
    cont, mx, my = st.norms(b, ru, au, rv, av)
    return ResidualReport([cont], [mx], [my], iters_used=0, converged=True)


def momentum_imbalance(field: FlowField, mask: ChannelMask, props: FluidProps | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-face momentum residuals (N per unit depth) for u and v faces."""
    props = props or field.props
    st = _Staggered(mask, props)
    st.load_collocated(field)
    _, _, ru, _, _, _, rv, _ = st.momentum(1.0, solve=False)
    return ru, rv


def boundary_fluxes(field: FlowField, mask: ChannelMask) -> tuple[list[float], list[float]]:
    """Volumetric flux (m^2/s per unit depth) entering through each inlet segment
    and leaving through each outlet segment, from the collocated maps."""
    h = mask.pixel_size
    rows, cols = mask.shape

    def flux(seg, outward):
        nx, ny = seg.inward
        total = 0.0
        for i, j in seg.pixels(rows, cols):
            total += (nx * field.vx[i, j] + ny * field.vy[i, j]) * h
        return -total if outward else total

    return [flux(s, False) for s in mask.inlets], [flux(s, True) for s in mask.outlets]

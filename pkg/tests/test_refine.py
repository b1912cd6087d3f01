import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flownav.errors import InputError, ObsOutsideFluid
from flownav.fixtures import obstacle_channel
from flownav.fvm import parabolic_cell_means, solve_steady
from flownav.grid import FlowField, FluidProps, ObservationSet, straight_channel
from flownav.refine import (
    K_D1,
    K_D2,
    PixelRefiner,
    RefineConfig,
    balanced_weights,
    boundary_band_mask,
    observation_pixels,
    pde_residuals,
    refine_field,
    residual_region,
    rmse,
    setup_problem,
    stencil_d1,
    stencil_d2,
)


def test_printed_kernels():
    assert K_D1.tolist() == [-0.5, 0.0, 0.5]
    assert K_D2.tolist() == [[0.0, -0.25, 0.0], [-0.25, 1.0, -0.25], [0.0, -0.25, 0.0]]


def _operator_row_d1(axis):
    # weights the operator puts on the 3 neighbours of pixel (5, 5)
    row = []
    for k in (-1, 0, 1):
        imp = np.zeros((11, 11))
        if axis == "x":
            imp[5, 5 + k] = 1.0
        else:
            imp[5 + k, 5] = 1.0
        row.append(stencil_d1(imp, axis)[5, 5])
    return np.array(row)


def test_d1_impulse_reproduces_kernel():
    assert np.array_equal(_operator_row_d1("x"), K_D1)
    assert np.array_equal(_operator_row_d1("y"), K_D1)
    # as a correlation, the spread of a single impulse is the mirrored kernel
    imp = np.zeros((11, 11))
    imp[5, 5] = 1.0
    assert np.array_equal(stencil_d1(imp, "x")[5, 4:7], K_D1[::-1])


def test_d2_impulse_reproduces_kernel():
    imp = np.zeros((9, 9))
    imp[4, 4] = 1.0
    assert np.array_equal(stencil_d2(imp)[3:6, 3:6], K_D2)
    weights = np.zeros((3, 3))
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            e = np.zeros((9, 9))
            e[4 + di, 4 + dj] = 1.0
            weights[di + 1, dj + 1] = stencil_d2(e)[4, 4]
    assert np.array_equal(weights, K_D2)


def test_d1_examples():
    jj = np.tile(np.arange(10.0), (6, 1))
    assert np.all(stencil_d1(jj, "x")[:, 1:-1] == 1.0)
    assert np.all(stencil_d1(jj, "x")[:, [0, -1]] == 1.0)
    assert np.all(stencil_d1(np.full((5, 5), 3.0), "y") == 0.0)
    assert stencil_d1(jj**2, "x")[2, 5] == 10.0
    assert np.all(stencil_d1(jj.T, "y") == 1.0)


def test_d2_examples():
    ii, jj = np.mgrid[0:9, 0:9].astype(float)
    assert np.all(stencil_d2(np.full((5, 5), 2.0)) == 0.0)
    assert np.all(stencil_d2(ii**2 + jj**2)[1:-1, 1:-1] == -1.0)
    assert np.all(stencil_d2(ii * jj)[1:-1, 1:-1] == 0.0)


def test_stencils_reject_small_maps():
    with pytest.raises(InputError):
        stencil_d1(np.zeros((5, 2)), "x")
    with pytest.raises(InputError):
        stencil_d2(np.zeros((2, 5)))


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), c=st.floats(-10, 10))
def test_d1_exact_on_affine(a, b, c):
    ii, jj = np.mgrid[0:7, 0:8].astype(float)
    m = a * jj + b * ii + c
    tol = 1e-12 * (abs(a) + abs(b) + abs(c) + 1)
    assert np.allclose(stencil_d1(m, "x"), a, rtol=0, atol=tol)
    assert np.allclose(stencil_d1(m, "y"), b, rtol=0, atol=tol)


def test_uniform_field_residuals_zero():
    f = FlowField(np.full((12, 16), 0.3), np.zeros((12, 16)), np.full((12, 16), 7.0), pixel_size=1e-5)
    r = pde_residuals(f)
    assert np.all(r.r_cont == 0) and np.all(r.r_momx == 0) and np.all(r.r_momy == 0)


def test_rigid_rotation_residuals():
    props = FluidProps()
    h, w = 1e-5, 0.2
    y, x = (np.mgrid[0:20, 0:20] + 0.5) * h
    f = FlowField(-w * y, w * x, 0.5 * props.rho * w**2 * (x**2 + y**2), pixel_size=h, props=props)
    r = pde_residuals(f)
    assert np.max(np.abs(r.r_cont)) <= 1e-12 * w
    scale = props.rho * w**2 * 20 * h
    assert np.max(np.abs(r.r_momx)) <= 1e-9 * scale
    assert np.max(np.abs(r.r_momy)) <= 1e-9 * scale


def _kovasznay(n, nu=1 / 40):
    h = 1.0 / n
    y, x = (np.mgrid[0:n, 0:n] + 0.5) * h
    re = 1 / nu
    lam = re / 2 - np.sqrt(re * re / 4 + 4 * np.pi**2)
    u = 1 - np.exp(lam * x) * np.cos(2 * np.pi * y)
    v = lam / (2 * np.pi) * np.exp(lam * x) * np.sin(2 * np.pi * y)
    p = 0.5 * (1 - np.exp(2 * lam * x))
    return FlowField(u, v, p, props=FluidProps(rho=1.0, nu=nu), pixel_size=h)


def test_residual_second_order_on_exact_navier_stokes():
    err = []
    for n in (16, 32, 64, 128):
        r = pde_residuals(_kovasznay(n))
        err.append(max(np.abs(r.r_cont).max(), np.abs(r.r_momx).max(), np.abs(r.r_momy).max()))
    orders = np.log2(np.array(err[:-1]) / np.array(err[1:]))
    assert np.all(orders >= 1.8), orders


def _poiseuille(rows, cols, h, mean=1e-3, props=FluidProps()):
    """Point-sampled parabola with its exact pressure gradient; walls at the raster border."""
    mask = straight_channel(cols, rows, h, mean)
    H = rows * h
    G = 12.0 * props.mu * mean / H**2
    y, x = (np.mgrid[0:rows, 0:cols] + 0.5) * h
    vx = G / (2 * props.mu) * y * (H - y)
    return mask, FlowField(vx, np.zeros_like(vx), -G * (x - x[0, -1]), mask, props)


def test_poiseuille_residual_vanishes():
    for n in (16, 32, 64):
        _, f = _poiseuille(n, 3 * n, 1e-5)
        r = pde_residuals(f)
        G = 12.0 * f.props.mu * 1e-3 / (n * 1e-5) ** 2
        assert np.max(np.abs(r.r_momx)) <= 1e-9 * G
        assert np.max(np.abs(r.r_cont)) == 0.0


def test_residuals_zero_outside_interior(small_obstacle):
    mask, field = small_obstacle
    r = pde_residuals(field)
    outside = ~residual_region(mask.fluid)
    for m in (r.r_cont, r.r_momx, r.r_momy):
        assert np.all(m[outside] == 0)
        assert np.all(m[~mask.fluid] == 0)


def test_boundary_band():
    fluid = np.ones((14, 14), bool)
    fluid[6:8, 6:8] = False
    band1 = boundary_band_mask(fluid, 1)
    assert band1[0].all() and band1[:, -1].all()
    assert band1[5, 5] and band1[8, 7] and not band1[1, 1] and not band1[4, 4]
    band2 = boundary_band_mask(fluid, 2)
    assert band2[1, 1] and band2[4, 4] and band2[9, 9]
    assert not band2[2, 2] and not band2[3, 10]
    assert np.all(band2 >= band1)
    assert not np.any(band2 & ~fluid)


def test_observation_pixels_average_collisions():
    f = FlowField(np.zeros((10, 10)), np.zeros((10, 10)), np.zeros((10, 10)), pixel_size=1.0)
    obs = ObservationSet(np.array([[3.2, 4.7], [3.9, 4.1], [0.5, 0.5]]), np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]]))
    got = observation_pixels(f, obs)
    assert set(got) == {(4, 3), (0, 0)}
    assert got[(4, 3)].tolist() == [2.0, 1.0]


def test_obs_outside_fluid(small_obstacle):
    mask, field = small_obstacle
    i, j = np.argwhere(~mask.fluid)[0]
    obs = ObservationSet(np.array([[(j + 0.5) * mask.pixel_size, (i + 0.5) * mask.pixel_size]]), np.zeros((1, 2)))
    with pytest.raises(ObsOutsideFluid):
        refine_field(field, obs, FluidProps(), RefineConfig(max_iters=1))


def test_gradient_matches_finite_differences(small_obstacle):
    mask, field = small_obstacle
    props = FluidProps()
    start, obj, _ = setup_problem(field, ObservationSet.empty(), props, RefineConfig(loss_weights=(3.0, 1.0, 0.5)))
    rng = np.random.default_rng(7)
    x = obj.pack(start.vx, start.vy, start.p) + 0.05 * rng.standard_normal(obj.nv * 2 + obj.np_)
    loss, _, g = obj(x)
    for k in rng.choice(x.size, 20, replace=False):
        step = 1e-6 * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = step
        fd = (obj(x + e, False)[0] - obj(x - e, False)[0]) / (2 * step)
        assert abs(fd - g[k]) <= 1e-5 * max(abs(g[k]), 1e-8 * loss)


def _noisy(field, rng, amp=0.05):
    u = np.abs(field.vx).max()
    fl = field.fluid
    return field.replace(
        vx=np.where(fl, field.vx + amp * u * rng.standard_normal(field.shape), 0.0),
        vy=np.where(fl, field.vy + amp * u * rng.standard_normal(field.shape), 0.0),
    )


def test_clamps_bitwise_and_history_monotone(small_obstacle, rng):
    mask, field = small_obstacle
    init = _noisy(field, rng)
    idx = np.argwhere(mask.fluid)[rng.choice(int(mask.fluid.sum()), 15, replace=False)]
    pos = (idx[:, ::-1] + 0.5) * mask.pixel_size
    vel = rng.standard_normal((15, 2)) * 1e-3
    obs = ObservationSet(pos, vel)
    cfg = RefineConfig(max_iters=300)
    res = refine_field(init, obs, FluidProps(), cfg)
    out = res.field
    band = boundary_band_mask(mask.fluid, 1)
    band[idx[:, 0], idx[:, 1]] = False  # observations take precedence over the band
    assert np.array_equal(out.vx[band], init.vx[band])
    assert np.array_equal(out.vy[band], init.vy[band])
    for (i, j), v in zip(idx, vel):
        assert out.vx[i, j] == v[0] and out.vy[i, j] == v[1]
    assert np.all(out.vx[~mask.fluid] == 0) and np.all(out.vy[~mask.fluid] == 0)
    losses = res.losses
    assert np.all(np.diff(losses) <= 0)
    assert losses[-1] < losses[0]
    assert res.history[0][0] == 0


def test_gradient_descent_also_monotone(small_obstacle, rng):
    _, field = small_obstacle
    res = refine_field(_noisy(field, rng), None, FluidProps(), RefineConfig(max_iters=50, method="gd"))
    assert np.all(np.diff(res.losses) <= 0)
    assert res.losses[-1] < res.losses[0]


def test_identity_on_exact_solution_with_consistent_obs(rng):
    mask, f = _poiseuille(24, 64, 1e-5)
    idx = np.argwhere(residual_region(mask.fluid))[rng.choice(int(residual_region(mask.fluid).sum()), 50, replace=False)]
    obs = ObservationSet((idx[:, ::-1] + 0.5) * 1e-5, np.c_[f.vx[idx[:, 0], idx[:, 1]], f.vy[idx[:, 0], idx[:, 1]]])
    res = refine_field(f, obs, FluidProps(), RefineConfig())
    start_loss = res.losses[0]
    G = 12.0 * f.props.mu * 1e-3 / (24e-5) ** 2
    # the start is already stationary: its loss is roundoff on the scale of the forcing
    assert start_loss <= 1e-12 * G**2 * mask.fluid.sum()
    assert abs(res.losses[-1] - start_loss) < 1e-12 * G**2
    assert np.max(np.abs(res.field.vx - f.vx)) <= 1e-9 * np.abs(f.vx).max()
    assert np.max(np.abs(res.field.p - f.p)) <= 1e-9 * np.abs(f.p).max()


def test_empty_observations_keep_band(small_obstacle, rng):
    mask, field = small_obstacle
    init = _noisy(field, rng)
    res = refine_field(init, ObservationSet.empty(), FluidProps(), RefineConfig(max_iters=100))
    band = boundary_band_mask(mask.fluid, 1)
    assert np.array_equal(res.field.vx[band], init.vx[band])
    assert res.losses[-1] < res.losses[0]
    assert not res.field.same_maps(init)


def test_no_free_pixels_is_immediate(small_obstacle):
    _, field = small_obstacle
    res = refine_field(field, None, FluidProps(), RefineConfig(boundary_band=50))
    assert res.converged
    assert np.array_equal(res.field.vx, field.vx)


def test_assimilation_reduces_error():
    mask = obstacle_channel(48, 20, v_inlet=0.05, size=3)
    truth_props, guess_props = FluidProps(nu=1e-6), FluidProps(nu=1.3e-6)
    truth, _ = solve_steady(mask, truth_props)
    init, _ = solve_steady(mask, guess_props)
    i = 10
    js = np.arange(1, 47, 4)
    js = js[mask.fluid[i, js]]
    obs = ObservationSet(np.c_[(js + 0.5) * 1e-5, np.full(js.size, (i + 0.5) * 1e-5)],
                         np.c_[truth.vx[i, js], truth.vy[i, js]])
    cfg = RefineConfig(loss_weights=balanced_weights(init, truth_props), boundary_band=2)
    res = PixelRefiner().refine(init, obs, truth_props, cfg)
    assert rmse(res.field, truth) < rmse(init, truth)


def test_refine_result_unpacks_and_writes(tmp_path, small_obstacle):
    _, field = small_obstacle
    res = refine_field(field, None, FluidProps(), RefineConfig(max_iters=5))
    out, history = res
    assert out is res.field and history is res.history
    res.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,r_cont,r_momx,r_momy"
    assert len(lines) == len(history) + 1


@pytest.mark.parametrize(
    "kw",
    [dict(step_size=0.0), dict(boundary_band=0), dict(loss_weights=(0, 0, 0)), dict(loss_weights=(1, -1, 1)),
     dict(method="adam")],
)
def test_config_validation(kw):
    with pytest.raises(InputError):
        RefineConfig(**kw)


def test_balanced_weights_units():
    f = FlowField(np.full((8, 8), 2e-3), np.zeros((8, 8)), np.zeros((8, 8)), pixel_size=1e-5)
    w = balanced_weights(f, FluidProps())
    assert w[0] == pytest.approx((1e-3 / 1e-5 + 1000 * 2e-3) ** 2)
    assert w[1:] == (1.0, 1.0)


def test_parabolic_profile_used_by_fixtures_is_consistent():
    # refine and the FVM solver agree on what a developed channel looks like
    prof = parabolic_cell_means(24, 1e-3)
    mask, f = _poiseuille(24, 8, 1e-5)
    assert np.abs(prof - f.vx[:, 0]).max() < 0.02 * prof.max()

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flownav.errors import (
    BadAnnotation,
    BadFormat,
    DimensionMismatch,
    NotConnected,
    ObsOutsideFluid,
    OutOfBounds,
    TooFewSamples,
)
from flownav.grid import (
    BoundarySegment,
    ChannelMask,
    FlowField,
    FluidProps,
    ObservationSet,
    decode_field,
    encode_field,
    encode_pgm,
    export_field,
    import_field,
    load_mask,
    load_mask_files,
    parse_pgm,
    preprocess_observations,
    read_observations,
    sample_velocity,
    save_mask_files,
    straight_channel,
    write_observations,
)

LEFT = {"edge": "left", "from": 0, "to": 127, "v_inlet_mps": 1e-3}
RIGHT = {"edge": "right", "from": 0, "to": 127}


def test_open_box_mask():
    raster = encode_pgm(np.ones((128, 128), bool))
    mask = load_mask(raster, 1e-5, LEFT, RIGHT)
    assert mask.fluid.sum() == 16384
    assert mask.inlets[0].v_inlet == 1e-3


def test_separating_band_not_connected():
    fluid = np.ones((128, 128), bool)
    fluid[:, 60:64] = False
    with pytest.raises(NotConnected):
        load_mask(encode_pgm(fluid), 1e-5, LEFT, RIGHT)


def test_branched_crop_is_valid(y_mask):
    # a 128x128 crop around a branched channel, as in the dataset samples
    fluid = np.zeros((128, 128), bool)
    fluid[32:96, :96] = y_mask.fluid
    fluid[32:96, 96:] = y_mask.fluid[:, -1:]
    sc = y_mask.sidecar()
    inlet = {**sc["inlet"], "from": sc["inlet"]["from"] + 32, "to": sc["inlet"]["to"] + 32}
    outlets = [{**o, "from": o["from"] + 32, "to": o["to"] + 32} for o in sc["outlet"]]
    mask = load_mask(encode_pgm(fluid), 1e-5, inlet, outlets)
    assert mask.shape == (128, 128)
    assert len(mask.outlets) == 2


def test_solid_inlet_is_bad_annotation():
    fluid = np.ones((16, 16), bool)
    fluid[0, 0] = False
    with pytest.raises(BadAnnotation):
        ChannelMask.from_array(fluid, 1e-5, BoundarySegment("left", 0, 15, 1e-3), BoundarySegment("right", 0, 15))


def test_malformed_raster():
    with pytest.raises(BadFormat):
        parse_pgm(b"P2\n4 4\n255\n")
    with pytest.raises(BadFormat):
        parse_pgm(b"P5\n16 16\n255\n" + bytes(10))


def test_grey_levels_threshold():
    img = np.full((8, 8), 200, np.uint8)
    img[3, 3] = 100
    raster = b"P5\n8 8\n255\n" + img.tobytes()
    mask = load_mask(raster, 1e-5, {"edge": "left", "from": 0, "to": 7, "v_inlet_mps": 1e-3},
                     {"edge": "right", "from": 0, "to": 7})
    assert not mask.fluid[3, 3]
    assert mask.fluid.sum() == 63
    img[5, 5], img[6, 6] = 127, 128
    mask = load_mask(b"P5\n8 8\n255\n" + img.tobytes(), 1e-5,
                     {"edge": "left", "from": 0, "to": 7, "v_inlet_mps": 1e-3}, {"edge": "right", "from": 0, "to": 7})
    assert not mask.fluid[5, 5] and mask.fluid[6, 6]


def test_pgm_comment_header():
    fluid = np.ones((8, 9), bool)
    raster = b"P5\n# made by hand\n9 8\n255\n" + (fluid.astype(np.uint8) * 255).tobytes()
    assert parse_pgm(raster).shape == (8, 9)


def test_mask_files_round_trip(tmp_path, y_mask):
    save_mask_files(y_mask, tmp_path / "m.pgm", tmp_path / "m.json")
    back = load_mask_files(tmp_path / "m.pgm", tmp_path / "m.json")
    assert np.array_equal(back.fluid, y_mask.fluid)
    assert back.inlets == y_mask.inlets
    assert back.outlets == y_mask.outlets
    assert back.pixel_size == y_mask.pixel_size


def test_too_small_mask():
    with pytest.raises(BadFormat):
        ChannelMask.from_array(np.ones((7, 20), bool), 1e-5, BoundarySegment("left", 0, 6), BoundarySegment("right", 0, 6))


def _bfs_connected(fluid, a, b):
    seen = np.zeros_like(fluid)
    q = deque([a])
    seen[a] = True
    while q:
        i, j = q.popleft()
        if (i, j) == b:
            return True
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < fluid.shape[0] and 0 <= nj < fluid.shape[1] and fluid[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                q.append((ni, nj))
    return False


def test_flood_fill_matches_bfs(rng):
    agree = 0
    for _ in range(60):
        fluid = rng.random((32, 32)) < 0.62
        fluid[10, 0] = fluid[20, 31] = True
        expect = _bfs_connected(fluid, (10, 0), (20, 31))
        try:
            ChannelMask.from_array(fluid, 1e-5, BoundarySegment("left", 10, 10, 1e-3), BoundarySegment("right", 20, 20))
            got = True
        except NotConnected:
            got = False
        assert got == expect
        agree += got
    # the sample should exercise both outcomes
    assert 0 < agree < 60


def _uniform(c=0.3, shape=(10, 12), h=1e-5):
    vx = np.full(shape, c)
    return FlowField(vx, np.zeros(shape), np.zeros(shape), pixel_size=h)


def test_sample_constant_field():
    f = _uniform()
    assert np.allclose(sample_velocity(f, (3.3e-5, 7.1e-5)), [0.3, 0.0], rtol=0, atol=1e-15)


def test_sample_at_pixel_center():
    rng = np.random.default_rng(0)
    vx, vy = rng.random((2, 10, 12))
    f = FlowField(vx, vy, np.zeros((10, 12)), pixel_size=1e-5)
    v = sample_velocity(f, ((4 + 0.5) * 1e-5, (6 + 0.5) * 1e-5))
    assert v[0] == vx[6, 4] and v[1] == vy[6, 4]


def test_sample_midpoint():
    vx = np.zeros((10, 12))
    vx[:, 5] = 1.0
    f = FlowField(vx, np.zeros_like(vx), np.zeros_like(vx), pixel_size=1.0)
    assert sample_velocity(f, (5.0, 3.5))[0] == pytest.approx(0.5, abs=1e-15)


def test_sample_out_of_bounds():
    with pytest.raises(OutOfBounds):
        sample_velocity(_uniform(), (-1e-6, 1e-5))


@settings(max_examples=60, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
       x=st.floats(0.5, 11.5), y=st.floats(0.5, 9.5))
def test_sample_exact_on_affine(a, b, c, x, y):
    h = 1e-5
    jj, ii = np.meshgrid(np.arange(12) + 0.5, np.arange(10) + 0.5)
    vx = a * jj + b * ii + c
    f = FlowField(vx, -vx, np.zeros_like(vx), pixel_size=h)
    got = sample_velocity(f, (x * h, y * h))
    expect = a * x + b * y + c
    assert got[0] == pytest.approx(expect, rel=1e-12, abs=1e-12 * (abs(a) + abs(b) + abs(c) + 1))
    assert got[1] == pytest.approx(-expect, rel=1e-12, abs=1e-12 * (abs(a) + abs(b) + abs(c) + 1))


def test_sample_solid_neighbour_counts_zero():
    mask = straight_channel(10, 10, 1.0, 1e-3, wall_rows=1)
    f = FlowField.on_mask(mask, 1.0, 0.0)
    # halfway between the first fluid row and the wall row
    assert sample_velocity(f, (5.0, 1.0))[0] == pytest.approx(0.5)


def test_solid_velocity_rejected():
    mask = straight_channel(10, 10, 1.0, 1e-3, wall_rows=1)
    with pytest.raises(Exception):
        FlowField(np.ones((10, 10)), np.zeros((10, 10)), np.zeros((10, 10)), mask)


def _track(n):
    s = np.linspace(0, 1e-3, n)
    return np.c_[s, np.full(n, 2e-4)]


def test_preprocess_constant():
    obs = preprocess_observations(_track(100), np.tile([0.1, 0.0], (100, 1)))
    assert np.allclose(obs.velocities, [0.1, 0.0], atol=1e-12)
    assert obs.source == "ROBOT_OBSERVER"


def test_preprocess_removes_outlier_and_fits_linear():
    pos = _track(100)
    s = pos[:, 0]
    vx = 1e-3 + 0.5 * s
    vel = np.c_[vx, np.zeros(100)]
    vel[37] = [5.0, 0.0]
    obs = preprocess_observations(pos, vel)
    assert not np.any(np.all(obs.positions == pos[37], axis=1))
    # closed-form oracle: the kept samples are exactly linear, so the fit reproduces them
    kept = np.isin(pos[:, 0], obs.positions[:, 0])
    err = np.abs(obs.velocities[:, 0] - vx[kept])
    assert err.max() <= 1e-9 * np.abs(vx).max()


def test_preprocess_too_few():
    with pytest.raises(TooFewSamples):
        preprocess_observations(_track(9), np.ones((9, 2)))
    with pytest.raises(TooFewSamples):
        preprocess_observations(_track(12), np.ones((12, 2)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(17, 300))
def test_preprocess_count(n):
    rng = np.random.default_rng(n)
    vel = np.c_[rng.permutation(n) + 1.0, np.zeros(n)] * 1e-4
    obs = preprocess_observations(_track(n), vel)
    assert abs(len(obs) - int(np.ceil(0.6 * n))) <= 1


def test_observations_outside_fluid():
    mask = straight_channel(10, 10, 1e-5, 1e-3, wall_rows=1)
    obs = ObservationSet(np.array([[5e-5, 0.5e-5]]), np.array([[0.0, 0.0]]))
    with pytest.raises(ObsOutsideFluid):
        obs.check_inside(mask)


def test_observation_csv_round_trip(tmp_path):
    obs = ObservationSet(np.array([[1e-5, 2e-5], [3e-5, 1.0 / 3.0 * 1e-5]]), np.array([[0.1, -0.2], [1e-7, 0.0]]))
    write_observations(obs, tmp_path / "o.csv")
    back = read_observations(tmp_path / "o.csv")
    assert np.array_equal(back.positions, obs.positions)
    assert np.array_equal(back.velocities, obs.velocities)
    (tmp_path / "empty.csv").write_text("x_m,y_m,vx_mps,vy_mps\n")
    assert len(read_observations(tmp_path / "empty.csv")) == 0
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(BadFormat):
        read_observations(tmp_path / "bad.csv")


def test_field_round_trip_bitwise(tmp_path, rng):
    vx, vy, p = rng.standard_normal((3, 9, 13))
    f = FlowField(vx, vy, p, pixel_size=1.0 / 3.0 * 1e-5)
    export_field(f, tmp_path / "f.mfn")
    g = import_field(tmp_path / "f.mfn")
    assert g.same_maps(f)
    assert g.pixel_size == f.pixel_size
    assert (tmp_path / "f.mfn").read_bytes()[:4] == b"MFN1"


def test_field_layout():
    vx = np.arange(24.0).reshape(4, 6)
    f = FlowField(vx, -vx, 2 * vx, pixel_size=0.5)
    blob = encode_field(f)
    assert np.frombuffer(blob[4:12], "<u4").tolist() == [6, 4]
    assert np.frombuffer(blob[12:20], "<f8")[0] == 0.0
    assert np.frombuffer(blob[20:28], "<f8")[0] == 1.0
    assert np.frombuffer(blob[-8:], "<f8")[0] == 0.5


def test_truncated_field():
    blob = encode_field(_uniform())
    with pytest.raises(BadFormat):
        decode_field(blob[:-3])
    with pytest.raises(BadFormat):
        decode_field(b"XXXX" + blob[4:])


def test_field_against_wrong_mask():
    f = FlowField(np.zeros((128, 128)), np.zeros((128, 128)), np.zeros((128, 128)), pixel_size=1e-5)
    mask = straight_channel(64, 64, 1e-5, 1e-3)
    with pytest.raises(DimensionMismatch):
        decode_field(encode_field(f), mask)


def test_fluid_props_validation():
    with pytest.raises(Exception):
        FluidProps(rho=0.0)
    assert FluidProps(rho=2.0, nu=3.0).mu == 6.0

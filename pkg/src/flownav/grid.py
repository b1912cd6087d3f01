"""Channel geometry, flow fields and observations.

Coordinates: a pixel ``(i, j)`` is row ``i``, column ``j``.  Its center sits at
``x = (j + 0.5) * h``, ``y = (i + 0.5) * h`` where ``h`` is the pixel size in
meters, so ``x`` grows along columns and ``y`` grows down the rows (image
convention).  All velocities are in m/s, pressures in Pa.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BadAnnotation,
    BadFormat,
    DimensionMismatch,
    InputError,
    NotConnected,
    ObsOutsideFluid,
    OutOfBounds,
    TooFewSamples,
)

SOLID = 0
FLUID = 1

EDGES = ("left", "right", "top", "bottom")
# inward unit normal of each raster edge as (x, y)
_INWARD = {"left": (1.0, 0.0), "right": (-1.0, 0.0), "top": (0.0, 1.0), "bottom": (0.0, -1.0)}

_FOUR = ndimage.generate_binary_structure(2, 1)


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BoundarySegment:
    """A run of border pixels ``start..stop`` (inclusive) along one raster edge."""

    edge: str
    start: int
    stop: int
    v_inlet: float = 0.0

    def __post_init__(self):
        if self.edge not in EDGES:
            raise BadAnnotation(f"unknown edge {self.edge!r}")
        if self.stop < self.start:
            raise BadAnnotation(f"empty segment {self.start}..{self.stop}")

    @classmethod
    def from_dict(cls, d: dict) -> "BoundarySegment":
        try:
            return cls(
                edge=str(d["edge"]),
                start=int(d["from"]),
                stop=int(d["to"]),
                v_inlet=float(d.get("v_inlet_mps", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BadAnnotation(f"malformed segment {d!r}") from exc

    def to_dict(self, inlet: bool) -> dict:
        d = {"edge": self.edge, "from": self.start, "to": self.stop}
        if inlet:
            d["v_inlet_mps"] = self.v_inlet
        return d

    @property
    def inward(self) -> tuple[float, float]:
        return _INWARD[self.edge]

    @property
    def length(self) -> int:
        return self.stop - self.start + 1

    def pixels(self, height: int, width: int) -> list[tuple[int, int]]:
        extent = height if self.edge in ("left", "right") else width
        if self.start < 0 or self.stop >= extent:
            raise BadAnnotation(f"segment {self.start}..{self.stop} outside {self.edge} edge of length {extent}")
        run = range(self.start, self.stop + 1)
        if self.edge == "left":
            return [(k, 0) for k in run]
        if self.edge == "right":
            return [(k, width - 1) for k in run]
        if self.edge == "top":
            return [(0, k) for k in run]
        return [(height - 1, k) for k in run]


def _as_segments(spec) -> tuple[BoundarySegment, ...]:
    if spec is None:
        return ()
    if isinstance(spec, (BoundarySegment, dict)):
        spec = [spec]
    return tuple(s if isinstance(s, BoundarySegment) else BoundarySegment.from_dict(s) for s in spec)


@dataclass(frozen=True)
class ChannelMask:
    """Binary fluid/solid raster with annotated inlet and outlet segments."""

    fluid: np.ndarray
    pixel_size: float
    inlets: tuple[BoundarySegment, ...]
    outlets: tuple[BoundarySegment, ...]

    def __post_init__(self):
        object.__setattr__(self, "fluid", _frozen(self.fluid, bool))
        object.__setattr__(self, "inlets", _as_segments(self.inlets))
        object.__setattr__(self, "outlets", _as_segments(self.outlets))
        if self.fluid.ndim != 2:
            raise BadFormat("mask must be two-dimensional")
        h, w = self.fluid.shape
        if h < 8 or w < 8:
            raise BadFormat(f"mask {w}x{h} smaller than 8x8")
        if not (self.pixel_size > 0 and np.isfinite(self.pixel_size)):
            raise InputError(f"pixel_size must be positive, got {self.pixel_size}")
        if not self.inlets or not self.outlets:
            raise BadAnnotation("at least one inlet and one outlet segment are required")
        for seg in self.inlets + self.outlets:
            for i, j in seg.pixels(h, w):
                if not self.fluid[i, j]:
                    raise BadAnnotation(f"{seg.edge} segment pixel ({i}, {j}) is SOLID")
        labels = self.labels
        tags = {labels[i, j] for seg in self.inlets + self.outlets for i, j in seg.pixels(h, w)}
        if len(tags) != 1:
            raise NotConnected("inlet and outlet pixels are not joined through FLUID")

    @classmethod
    def from_array(cls, fluid, pixel_size: float, inlets, outlets) -> "ChannelMask":
        return cls(np.asarray(fluid, bool), float(pixel_size), _as_segments(inlets), _as_segments(outlets))

    @property
    def height(self) -> int:
        return self.fluid.shape[0]

    @property
    def width(self) -> int:
        return self.fluid.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.fluid.shape

    @property
    def cells(self) -> np.ndarray:
        return self.fluid.astype(np.uint8)

    @cached_property
    def labels(self) -> np.ndarray:
        labels, _ = ndimage.label(self.fluid, structure=_FOUR)
        return labels

    @cached_property
    def active(self) -> np.ndarray:
        """FLUID pixels in the component joining inlets and outlets."""
        seg = self.inlets[0]
        i, j = seg.pixels(self.height, self.width)[0]
        out = self.labels == self.labels[i, j]
        out.setflags(write=False)
        return out

    def segment_pixels(self, which: str) -> list[list[tuple[int, int]]]:
        segs = self.inlets if which == "inlet" else self.outlets
        return [s.pixels(self.height, self.width) for s in segs]

    def pixel_of(self, pos) -> tuple[int, int]:
        x, y = float(pos[0]), float(pos[1])
        h = self.pixel_size
        if not (0.0 <= x <= self.width * h and 0.0 <= y <= self.height * h):
            raise OutOfBounds(f"position ({x:g}, {y:g}) outside the {self.width}x{self.height} raster")
        return min(int(y // h), self.height - 1), min(int(x // h), self.width - 1)

    def center(self, i, j) -> np.ndarray:
        return np.array([(j + 0.5) * self.pixel_size, (i + 0.5) * self.pixel_size])

    def sidecar(self) -> dict:
        def pack(segs, inlet):
            items = [s.to_dict(inlet) for s in segs]
            return items[0] if len(items) == 1 else items

        return {
            "pixel_size_m": self.pixel_size,
            "inlet": pack(self.inlets, True),
            "outlet": pack(self.outlets, False),
        }


@dataclass(frozen=True)
class FluidProps:
    rho: float = 1000.0
    nu: float = 1.0e-6

    def __post_init__(self):
        if not (self.rho > 0 and self.nu > 0):
            raise InputError(f"fluid properties must be positive (rho={self.rho}, nu={self.nu})")

    @property
    def mu(self) -> float:
        return self.rho * self.nu


@dataclass(frozen=True)
class FlowField:
    """Collocated per-pixel maps of vx, vy and p."""

    vx: np.ndarray
    vy: np.ndarray
    p: np.ndarray
    mask_ref: ChannelMask | None = None
    props: FluidProps = field(default_factory=FluidProps)
    pixel_size: float | None = None
    # staggered face velocities kept by the solver so residuals can be re-evaluated exactly
    faces: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("vx", "vy", "p"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not (self.vx.shape == self.vy.shape == self.p.shape) or self.vx.ndim != 2:
            raise DimensionMismatch("vx, vy and p must share one 2-D shape")
        if self.mask_ref is not None:
            if self.vx.shape != self.mask_ref.shape:
                raise DimensionMismatch(f"field {self.vx.shape} does not match mask {self.mask_ref.shape}")
            if self.pixel_size is None:
                object.__setattr__(self, "pixel_size", self.mask_ref.pixel_size)
            solid = ~self.mask_ref.fluid
            if np.any(self.vx[solid] != 0) or np.any(self.vy[solid] != 0):
                raise InputError("velocity must vanish on SOLID pixels")
        if self.pixel_size is None or not self.pixel_size > 0:
            raise InputError("pixel_size is required when no mask is attached")
        if not (np.all(np.isfinite(self.vx)) and np.all(np.isfinite(self.vy)) and np.all(np.isfinite(self.p))):
            raise InputError("field contains non-finite values")

    @classmethod
    def on_mask(cls, mask: ChannelMask, vx, vy, p=None, props: FluidProps | None = None) -> "FlowField":
        """Build a field on ``mask``, zeroing velocity on SOLID pixels."""
        solid = ~mask.fluid
        vx = np.where(solid, 0.0, np.broadcast_to(vx, mask.shape))
        vy = np.where(solid, 0.0, np.broadcast_to(vy, mask.shape))
        p = np.zeros(mask.shape) if p is None else np.broadcast_to(p, mask.shape)
        return cls(vx, vy, p, mask, props or FluidProps())

    @property
    def shape(self) -> tuple[int, int]:
        return self.vx.shape

    @property
    def fluid(self) -> np.ndarray:
        if self.mask_ref is None:
            return np.ones(self.shape, bool)
        return self.mask_ref.fluid

    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    def replace(self, **kw) -> "FlowField":
        args = dict(vx=self.vx, vy=self.vy, p=self.p, mask_ref=self.mask_ref, props=self.props,
                    pixel_size=self.pixel_size)
        args.update(kw)
        return FlowField(**args)

    def same_maps(self, other: "FlowField") -> bool:
        return (
            self.pixel_size == other.pixel_size
            and np.array_equal(self.vx, other.vx)
            and np.array_equal(self.vy, other.vy)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class ObservationSet:
    positions: np.ndarray
    velocities: np.ndarray
    source: str = "FILE"

    def __post_init__(self):
        pos = np.asarray(self.positions, float).reshape(-1, 2)
        vel = np.asarray(self.velocities, float).reshape(-1, 2)
        if pos.shape != vel.shape:
            raise InputError("positions and velocities differ in length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise InputError("observations contain non-finite values")
        if self.source not in ("ROBOT_OBSERVER", "FILE"):
            raise InputError(f"unknown observation source {self.source!r}")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "velocities", _frozen(vel))

    @classmethod
    def empty(cls) -> "ObservationSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.positions)

    def check_inside(self, mask: ChannelMask) -> None:
        for pos in self.positions:
            try:
                i, j = mask.pixel_of(pos)
            except OutOfBounds as exc:
                raise ObsOutsideFluid(str(exc)) from exc
            if not mask.fluid[i, j]:
                raise ObsOutsideFluid(f"observation at ({pos[0]:g}, {pos[1]:g}) lies in SOLID pixel ({i}, {j})")


# --------------------------------------------------------------------------
# mask I/O

_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def parse_pgm(raster: bytes) -> np.ndarray:
    """Decode an 8-bit binary PGM into a uint8 array of shape (height, width)."""
    m = _PGM_HEADER.match(raster)
    if m is None:
        raise BadFormat("not a binary (P5) PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if not (0 < maxval < 256):
        raise BadFormat(f"only 8-bit PGM is supported (maxval={maxval})")
    data = raster[m.end():]
    if len(data) < w * h:
        raise BadFormat(f"raster truncated: {len(data)} of {w * h} bytes")
    img = np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)
    return img if maxval == 255 else (img.astype(np.uint16) * 255 // maxval).astype(np.uint8)


def encode_pgm(fluid: np.ndarray) -> bytes:
    fluid = np.asarray(fluid, bool)
    h, w = fluid.shape
    return b"P5\n%d %d\n255\n" % (w, h) + (fluid.astype(np.uint8) * 255).tobytes()


def load_mask(raster: bytes, pixel_size: float, inlet, outlet) -> ChannelMask:
    """Build a validated mask from PGM bytes (0 = SOLID, 255 = FLUID).

    Grey levels are thresholded at mid-range. ``inlet`` and ``outlet`` are
    segment dicts (sidecar format), :class:`BoundarySegment` objects, or lists
    of either.
    """
    img = parse_pgm(raster)
    return ChannelMask.from_array(img >= 128, pixel_size, inlet, outlet)


def load_mask_files(pgm_path, sidecar_path) -> ChannelMask:
    try:
        meta = json.loads(Path(sidecar_path).read_text())
        pixel_size = float(meta["pixel_size_m"])
        inlet, outlet = meta["inlet"], meta["outlet"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise BadFormat(f"unreadable sidecar {sidecar_path}: {exc}") from exc
    try:
        raster = Path(pgm_path).read_bytes()
    except OSError as exc:
        raise BadFormat(f"unreadable raster {pgm_path}: {exc}") from exc
    return load_mask(raster, pixel_size, inlet, outlet)


def save_mask_files(mask: ChannelMask, pgm_path, sidecar_path) -> None:
    Path(pgm_path).write_bytes(encode_pgm(mask.fluid))
    Path(sidecar_path).write_text(json.dumps(mask.sidecar(), indent=2))


# --------------------------------------------------------------------------
# interpolation


def sample_velocity(field: FlowField, pos) -> np.ndarray:
    """Bilinear velocity between the four pixel centers around ``pos``.

    SOLID pixels hold zero velocity, so walls pull the interpolant to zero.
    Within half a pixel of the raster border the edge row/column is extended.
    """
    h = field.pixel_size
    rows, cols = field.shape
    x, y = float(pos[0]), float(pos[1])
    if not (0.0 <= x <= cols * h and 0.0 <= y <= rows * h):
        raise OutOfBounds(f"position ({x:g}, {y:g}) outside field extent")
    fx = x / h - 0.5
    fy = y / h - 0.5
    j0 = min(max(int(np.floor(fx)), 0), cols - 2)
    i0 = min(max(int(np.floor(fy)), 0), rows - 2)
    tx = min(max(fx - j0, 0.0), 1.0)
    ty = min(max(fy - i0, 0.0), 1.0)
    out = np.empty(2)
    for k, m in enumerate((field.vx, field.vy)):
        top = m[i0, j0] * (1.0 - tx) + m[i0, j0 + 1] * tx
        bot = m[i0 + 1, j0] * (1.0 - tx) + m[i0 + 1, j0 + 1] * tx
        out[k] = top * (1.0 - ty) + bot * ty
    return out


# --------------------------------------------------------------------------
# observations


def arc_length(positions) -> np.ndarray:
    pos = np.asarray(positions, float).reshape(-1, 2)
    steps = np.hypot(*np.diff(pos, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def preprocess_observations(
    positions,
    velocities,
    degree: int = 3,
    trim: float = 0.2,
    mask: ChannelMask | None = None,
    source: str = "ROBOT_OBSERVER",
) -> ObservationSet:
    """Trim the slowest and fastest ``trim`` fraction of samples by speed, then
    replace each velocity component by a least-squares polynomial in arc length."""
    pos = np.asarray(positions, float).reshape(-1, 2)
    vel = np.asarray(velocities, float).reshape(-1, 2)
    n = len(pos)
    if n < 10:
        raise TooFewSamples(f"{n} raw samples, need at least 10")
    s = arc_length(pos)
    cut = int(np.floor(trim * n))
    order = np.argsort(np.hypot(vel[:, 0], vel[:, 1]), kind="stable")
    keep = np.sort(order[cut : n - cut])
    if len(keep) < 10:
        raise TooFewSamples(f"only {len(keep)} samples survive trimming")
    s_keep = s[keep]
    if np.ptp(s_keep) == 0:
        s_keep = np.arange(len(keep), dtype=float)
    deg = min(degree, len(keep) - 1)
    smoothed = np.column_stack(
        [np.polynomial.Polynomial.fit(s_keep, vel[keep, k], deg)(s_keep) for k in range(2)]
    )
    obs = ObservationSet(pos[keep], smoothed, source)
    if mask is not None:
        obs.check_inside(mask)
    return obs


def read_observations(path) -> ObservationSet:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return ObservationSet.empty()
            missing = {"x_m", "y_m", "vx_mps", "vy_mps"} - set(reader.fieldnames)
            if missing:
                raise BadFormat(f"observation CSV lacks columns {sorted(missing)}")
            rows = [[float(r["x_m"]), float(r["y_m"]), float(r["vx_mps"]), float(r["vy_mps"])] for r in reader]
    except (OSError, ValueError, TypeError) as exc:
        raise BadFormat(f"unreadable observation CSV {path}: {exc}") from exc
    if not rows:
        return ObservationSet.empty()
    arr = np.array(rows)
    return ObservationSet(arr[:, :2], arr[:, 2:], "FILE")


def write_observations(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_m", "y_m", "vx_mps", "vy_mps"])
        for (x, y), (vx, vy) in zip(obs.positions, obs.velocities):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(vx)), repr(float(vy))])


# --------------------------------------------------------------------------
# field file: "MFN1", u32 width, u32 height, f64 planes vx, vy, p, f64 pixel size

MAGIC = b"MFN1"
_HEAD = struct.Struct("<4sII")


def encode_field(field: FlowField) -> bytes:
    rows, cols = field.shape
    planes = b"".join(np.ascontiguousarray(m, dtype="<f8").tobytes() for m in (field.vx, field.vy, field.p))
    return _HEAD.pack(MAGIC, cols, rows) + planes + struct.pack("<d", field.pixel_size)


def decode_field(blob: bytes, mask: ChannelMask | None = None, props: FluidProps | None = None) -> FlowField:
    if len(blob) < _HEAD.size or blob[:4] != MAGIC:
        raise BadFormat("missing MFN1 magic")
    _, cols, rows = _HEAD.unpack_from(blob)
    n = rows * cols
    expected = _HEAD.size + 3 * 8 * n + 8
    if len(blob) != expected:
        raise BadFormat(f"field file has {len(blob)} bytes, expected {expected}")
    planes = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=_HEAD.size).astype(float).reshape(3, rows, cols)
    (pixel_size,) = struct.unpack_from("<d", blob, _HEAD.size + 3 * 8 * n)
    if mask is not None and mask.shape != (rows, cols):
        raise DimensionMismatch(f"field {cols}x{rows} against mask {mask.width}x{mask.height}")
    try:
        return FlowField(planes[0], planes[1], planes[2], mask, props or FluidProps(), pixel_size)
    except DimensionMismatch:
        raise
    except InputError as exc:
        raise BadFormat(str(exc)) from exc


def export_field(field: FlowField, path) -> None:
    Path(path).write_bytes(encode_field(field))


def import_field(path, mask: ChannelMask | None = None, props: FluidProps | None = None) -> FlowField:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise BadFormat(f"cannot read {path}: {exc}") from exc
    return decode_field(blob, mask, props)


def straight_channel(width: int, height: int, pixel_size: float, v_inlet: float, wall_rows: int = 0) -> ChannelMask:
    """Open channel along x; ``wall_rows`` SOLID rows on top and bottom."""
    fluid = np.zeros((height, width), bool)
    fluid[wall_rows : height - wall_rows] = True
    lo, hi = wall_rows, height - wall_rows - 1
    return ChannelMask.from_array(
        fluid,
        pixel_size,
        [BoundarySegment("left", lo, hi, v_inlet)],
        [BoundarySegment("right", lo, hi)],
    )


def fluid_components(fluid: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(fluid, bool), structure=_FOUR)

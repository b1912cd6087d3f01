"""Command-line front end: solve -> refine -> plan -> track.

Exit codes: 0 ok, 2 input/validation error, 3 solver not converged,
4 no path / unreachable / not arrived, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fixtures
from .control import Gains, ref_lemniscate
from .errors import FlownavError, InputError
from .fvm import SolverConfig, solve_steady
from .grid import (
    FluidProps,
    ObservationSet,
    export_field,
    import_field,
    load_mask_files,
    read_observations,
    save_mask_files,
)
from .planner import astar, build_graph, travel_time
from .refine import RefineConfig, refine_field
from .sim import (
    ROTATION_FLOW,
    ControllerVariant,
    FlowSource,
    metrics,
    simulate_navigation,
    simulate_tracking,
    write_metrics,
)
from .svg import mask_overlay, tracking_plot

log = logging.getLogger("flownav")

EXIT_NOT_CONVERGED = 3

DEFAULTS = {
    "mask": None,
    "sidecar": None,
    "obs": None,
    "field": None,
    "out": "out",
    "fluid": {"rho": 1000.0, "nu": 1e-6},
    "solver": {},
    "refine": {},
    "planner": {"stride": 4, "k": 8, "v_max": None, "u_max": None},
    "gains": {},
    "sim": {"dt": 0.01, "duration": 120.0, "period": 60.0, "a": 1.8e-3, "b": 1.5e-3,
            "offset": [3e-4, 3e-4], "flow": [list(r) for r in ROTATION_FLOW], "eps": 1e-5, "plan_dt": None,
            "nav_dt": None, "nav_variant": "flow_comp"},
    "start": None,
    "goal": None,
    "seed": 0,
}


def _merge(base: dict, over: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise InputError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def _point(text: str) -> list[float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected x,y in meters, got {text!r}") from exc
    return [x, y]


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"unreadable config {args.config}: {exc}") from exc
        if not isinstance(user, dict):
            raise InputError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for key in ("mask", "sidecar", "obs", "field", "out", "start", "goal", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("dt", "duration"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["sim"][key] = val
    return cfg


def _props(cfg) -> FluidProps:
    return FluidProps(**cfg["fluid"])


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mask(cfg):
    if not cfg["mask"] or not cfg["sidecar"]:
        raise InputError("--mask and --sidecar are required")
    return load_mask_files(cfg["mask"], cfg["sidecar"])


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_solve(cfg) -> tuple[int, dict]:
    mask = _mask(cfg)
    out = _out(cfg)
    field, report = solve_steady(mask, _props(cfg), SolverConfig(**cfg["solver"]))
    export_field(field, out / "field.mfn")
    report.write_csv(out / "residuals.csv")
    summary = {"field": "field.mfn", "residuals": "residuals.csv",
               "converged": report.converged, "iterations": report.iters_used, "final_continuity": report.final[0]}
    _dump(summary, out / "solve.json")
    if not report.converged:
        print("warning: NOT_CONVERGED: maximum outer iterations reached", file=sys.stderr)
        return EXIT_NOT_CONVERGED, summary
    return 0, summary


def _field(cfg, mask):
    if cfg["field"]:
        return import_field(cfg["field"], mask, _props(cfg))
    field, report = solve_steady(mask, _props(cfg), SolverConfig(**cfg["solver"]))
    if not report.converged:
        print("warning: NOT_CONVERGED: planning on an unconverged field", file=sys.stderr)
    return field


def run_refine(cfg) -> tuple[int, dict]:
    mask = _mask(cfg)
    out = _out(cfg)
    field = _field(cfg, mask)
    obs = read_observations(cfg["obs"]) if cfg["obs"] else ObservationSet.empty()
    if len(obs) == 0:
        print("warning: NO_OBSERVATIONS: refining with the physics residual only", file=sys.stderr)
    obs.check_inside(mask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = refine_field(field, obs, _props(cfg), RefineConfig(**_refine_kw(cfg)))
    export_field(res.field, out / "refined.mfn")
    res.write_csv(out / "loss.csv")
    summary = {"refined": "refined.mfn", "loss": "loss.csv", "observations": len(obs),
               "iterations": len(res.history) - 1, "initial_loss": res.history[0][1],
               "final_loss": res.history[-1][1], "converged": res.converged, "step_failure": res.step_failure}
    _dump(summary, out / "refine.json")
    return 0, summary


def _refine_kw(cfg) -> dict:
    kw = dict(cfg["refine"])
    if "loss_weights" in kw:
        kw["loss_weights"] = tuple(kw["loss_weights"])
    return kw


def _speeds(cfg, field) -> tuple[float, float]:
    p = cfg["planner"]
    v_max = p["v_max"] or 1.5 * float(np.max(field.speed()))
    if not v_max > 0:
        raise InputError("v_max must be positive (flow is zero; set planner.v_max)")
    return v_max, p["u_max"] or v_max


def _check_endpoint(mask, pos, name):
    if pos is None:
        raise InputError(f"--{name} x,y is required")
    i, j = mask.pixel_of(pos)
    if not mask.fluid[i, j]:
        raise InputError(f"{name} ({pos[0]:g}, {pos[1]:g}) lies in a SOLID pixel")


def _plans(cfg, mask, field, euclidean: bool):
    _check_endpoint(mask, cfg["start"], "start")
    _check_endpoint(mask, cfg["goal"], "goal")
    v_max, u_max = _speeds(cfg, field)
    p = cfg["planner"]
    graph = build_graph(field, p["stride"], p["k"], v_max)
    plans = {"flow_aware": astar(graph, cfg["start"], cfg["goal"])}
    if euclidean:
        plans["euclidean"] = astar(graph.without_flow(), cfg["start"], cfg["goal"])
    for res in plans.values():
        res.travel_time = travel_time(res.path, field, u_max, cfg["sim"]["plan_dt"])
    return plans, v_max, u_max


def run_plan(cfg, euclidean: bool) -> tuple[int, dict]:
    mask = _mask(cfg)
    out = _out(cfg)
    field = _field(cfg, mask)
    plans, v_max, u_max = _plans(cfg, mask, field, euclidean)
    doc = {name: res.to_json() for name, res in plans.items()}
    doc["v_max"], doc["u_max"] = v_max, u_max
    _dump(doc, out / "plan.json")
    svg = mask_overlay(mask.fluid, mask.pixel_size, {k: v.path for k, v in plans.items()})
    (out / "plan.svg").write_text(svg)
    return 0, doc


def _track_one(cfg, variant: ControllerVariant, out: Path) -> dict:
    sim = cfg["sim"]
    gains = Gains.from_dict(cfg["gains"]) if cfg["gains"] else Gains()

    def reference(t):
        return ref_lemniscate(t, sim["period"], sim["a"], sim["b"])

    x0 = reference(0.0).x_d + np.asarray(sim["offset"], float)
    flow = FlowSource.linear(sim["flow"])
    trace = simulate_tracking(variant, flow, gains, x0, sim["duration"], sim["dt"], reference)
    name = variant.value
    trace.write_csv(out / f"trace_{name}.csv")
    m = metrics(trace, eps=sim["eps"])
    m["variant"] = name
    write_metrics(m, out / f"metrics_{name}.json")
    err = np.hypot(*trace.e.T)
    (out / f"track_{name}.svg").write_text(tracking_plot(trace.t, trace.x, trace.x_d, err, name))
    return m


def run_track(cfg, variant: str, jobs: int) -> tuple[int, dict]:
    out = _out(cfg)
    sim = cfg["sim"]
    if not (sim["dt"] > 0 and sim["duration"] > 0):
        raise InputError("dt and duration must be positive")
    names = [v.value for v in ControllerVariant] if variant == "all" else [variant]
    variants = [ControllerVariant(n) for n in names]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda v: _track_one(cfg, v, out), variants))
    summary = {m["variant"]: m for m in results}
    return 0, summary


def run_pipeline(cfg) -> tuple[int, dict]:
    mask = _mask(cfg)
    out = _out(cfg)
    summary = {"stages": {}}
    code = 0
    try:
        field, report = solve_steady(mask, _props(cfg), SolverConfig(**cfg["solver"]))
        export_field(field, out / "field.mfn")
        report.write_csv(out / "residuals.csv")
        summary["stages"]["solve"] = {"field": "field.mfn", "converged": report.converged,
                                      "iterations": report.iters_used}
        if not report.converged:
            code = EXIT_NOT_CONVERGED
        obs = read_observations(cfg["obs"]) if cfg["obs"] and Path(cfg["obs"]).exists() else ObservationSet.empty()
        if len(obs):
            obs.check_inside(mask)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = refine_field(field, obs, _props(cfg), RefineConfig(**_refine_kw(cfg)))
            field = res.field
            export_field(field, out / "refined.mfn")
            res.write_csv(out / "loss.csv")
            summary["stages"]["refine"] = {"refined": True, "field": "refined.mfn",
                                           "final_loss": res.history[-1][1]}
        else:
            print("warning: NO_OBSERVATIONS: continuing with the unrefined field", file=sys.stderr)
            summary["stages"]["refine"] = {"refined": False}
        plans, v_max, u_max = _plans(cfg, mask, field, euclidean=True)
        _dump({k: v.to_json() for k, v in plans.items()}, out / "plan.json")
        (out / "plan.svg").write_text(mask_overlay(mask.fluid, mask.pixel_size, {k: v.path for k, v in plans.items()}))
        summary["stages"]["plan"] = {"plan": "plan.json",
                                     **{k: v.travel_time for k, v in plans.items()}}
        gains = Gains.from_dict(cfg["gains"]) if cfg["gains"] else Gains()
        trace = simulate_navigation(plans["flow_aware"], FlowSource.grid(field), gains, u_max, cfg["sim"]["nav_dt"],
                                    ControllerVariant(cfg["sim"]["nav_variant"]), pixel_size=mask.pixel_size)
        trace.write_csv(out / "navigation.csv")
        summary["stages"]["track"] = {"trace": "navigation.csv", **metrics(trace)}
    except FlownavError as exc:
        summary["error"] = str(exc)
        _dump(summary, out / "summary.json")
        raise
    _dump(summary, out / "summary.json")
    return code, summary


def run_fixture(cfg, kind: str) -> tuple[int, dict]:
    out = _out(cfg)
    if kind == "straight":
        mask = fixtures.straight_channel(128, 32, 1e-5, 1e-3)
    elif kind == "y":
        mask = fixtures.y_bifurcation()
    elif kind == "obstacle":
        mask = fixtures.obstacle_channel()
    else:
        mask = fixtures.random_channel(np.random.default_rng(cfg["seed"]))
    save_mask_files(mask, out / "mask.pgm", out / "mask.json")
    return 0, {"mask": "mask.pgm", "sidecar": "mask.json"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its values")
    common.add_argument("--mask", help="8-bit PGM mask (0 = SOLID, 255 = FLUID)")
    common.add_argument("--sidecar", help="JSON sidecar with pixel size, inlets and outlets")
    common.add_argument("--obs", help="observation CSV (x_m,y_m,vx_mps,vy_mps)")
    common.add_argument("--field", help="existing MFN1 field file (skips the solve)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--start", type=_point, help="start position x,y in meters")
    common.add_argument("--goal", type=_point, help="goal position x,y in meters")
    common.add_argument("--seed", type=int, help="random seed for generated fixtures")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for batch runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flownav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="steady flow from a mask")
    sub.add_parser("refine", parents=[common], help="refine a field with observations")
    p = sub.add_parser("plan", parents=[common], help="flow-aware path plan")
    p.add_argument("--euclidean", action="store_true", help="also plan with plain Euclidean cost")
    t = sub.add_parser("track", parents=[common], help="closed-loop tracking of the figure-eight")
    t.add_argument("--variant", default="flow_comp", choices=[v.value for v in ControllerVariant] + ["all"])
    t.add_argument("--dt", type=float)
    t.add_argument("--duration", type=float)
    sub.add_parser("pipeline", parents=[common], help="solve, refine, plan and navigate")
    f = sub.add_parser("fixture", parents=[common], help="write a synthetic mask and sidecar")
    f.add_argument("--kind", default="straight", choices=["straight", "y", "obstacle", "random"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        if args.command == "solve":
            code, summary = run_solve(cfg)
        elif args.command == "refine":
            code, summary = run_refine(cfg)
        elif args.command == "plan":
            code, summary = run_plan(cfg, args.euclidean)
        elif args.command == "track":
            code, summary = run_track(cfg, args.variant, args.jobs)
        elif args.command == "pipeline":
            code, summary = run_pipeline(cfg)
        else:
            code, summary = run_fixture(cfg, args.kind)
    except FlownavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"error: INPUT: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())

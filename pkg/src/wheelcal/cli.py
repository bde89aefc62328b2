"""Command-line driver: ``wheelcal {simulate,match,calibrate,evaluate}``.

Every command writes into ``--out`` a ``manifest.json`` and one or more
data files that carry the same manifest. Library errors map to exit codes:
2 for malformed input, 3 for an unobservable parameter set, 4 for a solver
or matcher that did not converge and 5 for ill-conditioned linear algebra.
``WHEELCAL_THREADS`` caps the worker threads used by scan matching.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import __version__
from .errors import ConvergenceError, MatchFailure, SchemaError, WheelcalError
from .io import (
    read_displacements,
    read_json,
    read_model,
    read_odometry,
    read_scans,
    read_trajectory,
    write_csv,
    write_displacements,
    write_json,
    write_odometry,
    write_scans,
    write_trajectory,
    make_manifest,
)
from .kinematics import DiffDriveParams, MecanumParams, SensorModel, predict_displacements

log = logging.getLogger("wheelcal")

METHODS = ("cam", "cirls", "cirls-cf", "gp", "linear")

NOMINAL = {
    "diff_drive": SensorModel(DiffDriveParams(0.035, 0.035, 0.230), (0.0, 0.05, float(np.pi))),
    "mecanum": SensorModel(MecanumParams(0.03, 0.08, 0.16), (0.05, 0.0, 0.0)),
}

_POS = {"type": "number", "exclusiveMinimum": 0}
_TRIPLE = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SIM_SCHEMA = {
    "type": "object",
    "required": ["drive"],
    "additionalProperties": False,
    "properties": {
        "drive": {"enum": ["diff_drive", "mecanum"]},
        "params": {"type": "object", "additionalProperties": _POS},
        "extrinsic": _TRIPLE,
        "seed": {"type": "integer", "minimum": 0},
        "n_steps": {"type": "integer", "minimum": 2},
        "period": _POS,
        "profile": {"enum": ["mixed", "straight", "rotation", "translation"]},
        "sigma": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
        "noise_scale": {"type": "number", "minimum": 0},
        "outlier_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "outlier_range": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "slip_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "slip_factor": {"type": "number", "minimum": 0},
        "ticks_per_rev": _POS,
        "max_speed": _POS,
        "max_turn_rate": _POS,
        "scans": {"type": "boolean"},
        "world": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_landmarks": {"type": "integer", "minimum": 10},
                "half_size": _POS,
                "max_range": _POS,
                "range_noise": {"type": "number", "minimum": 0},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "distortion": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "radius-scale", "periodic-radius", "axis-skew"]},
                "scale": {"type": "array", "items": _POS},
                "amplitude": {"type": "number"},
                "wheel": {"type": "integer", "minimum": 0},
                "coupling": {"type": "array", "items": _TRIPLE, "minItems": 3, "maxItems": 3},
            },
        },
    },
}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _validate(data: Any, schema: dict, source: str) -> None:
    err = next(iter(sorted(jsonschema.Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.path))), None)
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(f"{source}: field {where}: {err.message}")


def _sim_setup(cfg: dict):
    from .simulate import Distortion, SimConfig, WorldConfig, k1_model, mecanum_model

    base = k1_model() if cfg["drive"] == "diff_drive" else mecanum_model()
    params = {**base.drive.__dict__, **cfg.get("params", {})}
    unknown = set(params) - set(base.drive.names)
    if unknown:
        raise SchemaError(f"config: field params: unknown parameter(s) {', '.join(sorted(unknown))}")
    model = SensorModel(type(base.drive)(**params), tuple(cfg.get("extrinsic", base.extrinsic)))
    keys = {f.name for f in fields(SimConfig)} - {"model", "world"}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k in keys}
    world = WorldConfig(**cfg.get("world", {}))
    dist = None
    if "distortion" in cfg:
        d = dict(cfg["distortion"])
        for key in ("scale", "coupling"):
            if key in d:
                d[key] = tuple(tuple(r) if isinstance(r, list) else r for r in d[key])
        dist = Distortion(**d)
    try:
        return SimConfig(model=model, world=world, **kw), dist
    except ValueError as exc:
        raise SchemaError(f"config: {exc}") from exc


def _load_init(args: argparse.Namespace, n_wheels: int | None = None) -> SensorModel:
    if getattr(args, "init", None):
        return read_model(args.init)
    if getattr(args, "nominal", None):
        return NOMINAL[args.nominal]
    if n_wheels == 4:
        return NOMINAL["mecanum"]
    return NOMINAL["diff_drive"]


def _options(args: argparse.Namespace, cls: type, extra: dict) -> Any:
    """Method settings: defaults, then ``--config`` JSON, then explicit flags."""
    names = {f.name for f in fields(cls)}
    opts: dict[str, Any] = {}
    if getattr(args, "config", None):
        data = read_json(args.config)
        bad = set(data) - names
        if bad:
            raise SchemaError(f"{Path(args.config).name}: field {sorted(bad)[0]}: not a {cls.__name__} setting")
        opts.update({k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
    opts.update({k: v for k, v in extra.items() if v is not None and k in names})
    try:
        return cls(**opts)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"settings: {exc}") from exc


def _input_paths(args: argparse.Namespace, names: Sequence[str]) -> list[str]:
    return [getattr(args, n) for n in names if getattr(args, n, None)]


def _run_config(args: argparse.Namespace, skip: Sequence[str] = ()) -> dict:
    """Arguments that shape the run, with paths reduced to base names."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out", "verbose", *skip) or v is None:
            continue
        out[k] = Path(v).name if isinstance(v, str) and ("/" in v or v.endswith((".json", ".jsonl"))) else v
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    from .simulate import synth_model_free, synth_scans

    cfg = read_json(args.config)
    _validate(cfg, SIM_SCHEMA, Path(args.config).name)
    if args.seed is not None:
        cfg["seed"] = args.seed
    sim_cfg, dist = _sim_setup(cfg)
    mf = synth_model_free(sim_cfg, dist)
    sim = mf.sim
    man = make_manifest("simulate", cfg, sim_cfg.seed)
    out = Path(args.out)
    write_odometry(out / "odometry.jsonl", sim.odometry, man)
    if cfg.get("scans", True):
        write_scans(out / "scans.jsonl", synth_scans(sim), man)
    write_displacements(out / "displacements.jsonl", sim.obs, man)
    truth = sim_cfg.model.as_dict()
    truth["outliers"] = sim.outliers.tolist()
    truth["slipped"] = sim.slipped.tolist()
    if dist is not None:
        truth["distortion"] = {k: v for k, v in dist.__dict__.items() if k != "substeps"}
    write_json(out / "truth.json", truth, man)
    write_trajectory(out / "trajectory_ref.jsonl", sim.times, sim.sensor_poses, man)
    write_json(out / "manifest.json", man)
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    from .cam import CamConfig, check_pair_excitation, select_scan_pairs
    from .scanmatch import MatchConfig, match_pairs, worker_count

    scans = read_scans(args.scans)
    odo = read_odometry(args.odometry)
    init = _load_init(args, odo.n_wheels)
    if not isinstance(init.drive, DiffDriveParams):
        raise SchemaError("match: pair selection needs a differential-drive nominal model")
    times = np.array([s.t for s in scans])
    try:
        idx = odo.index_of(times)
    except ValueError as exc:
        raise SchemaError(f"{Path(args.scans).name}: {exc}") from exc
    check_pair_excitation(odo, init.drive, CamConfig(), times)
    pairs = select_scan_pairs(odo, init.drive, CamConfig(), times)
    guess = predict_displacements(init, odo.segments(idx[pairs[:, 0]], idx[pairs[:, 1]]))
    obs = match_pairs(scans, [tuple(p) for p in pairs], guess, MatchConfig(),
                      keep_failures=args.keep_failures, workers=worker_count())
    n_fail = len(pairs) - sum(not o.flagged for o in obs)
    if n_fail:
        log.warning("%d of %d scan pairs failed to match", n_fail, len(pairs))
    if not any(not o.flagged for o in obs):
        raise MatchFailure("no scan pair could be matched")
    man = make_manifest("match", _run_config(args), None, _input_paths(args, ("scans", "odometry", "init")))
    write_displacements(Path(args.out) / "displacements.jsonl", obs, man)
    write_json(Path(args.out) / "manifest.json", man)
    return 0


def _learned(args: argparse.Namespace, obs, odo) -> tuple[Any, dict]:
    from .modelfree import fit_linear_model, gp_fit, optimize_hyperparameters

    kept = [o for o in obs if not o.flagged]
    try:
        j, k = odo.index_of([o.t_j for o in kept]), odo.index_of([o.t_k for o in kept])
    except ValueError as exc:
        raise SchemaError(f"{Path(args.displacements).name}: {exc}") from exc
    delta = (odo.ticks[k] - odo.ticks[j]).astype(float)
    s = np.array([o.s_hat for o in kept])
    sig = np.array([o.sigma for o in kept])
    if args.method == "linear":
        model = fit_linear_model(delta, s, sig, huber_c=args.huber_c or 1.345)
    else:
        C, hypers, info = optimize_hyperparameters(delta, s, sig, kernel=args.kernel, mean=args.gp_mean,
                                                   seed=args.seed or 0)
        model = gp_fit(delta, s, sig, kernel=args.kernel, mean=args.gp_mean, hypers=hypers, C=C)
        model.info = info
    return model, {"method": args.method, "n_train": len(kept), "model_file": "model.json", "info": model.info}


def cmd_calibrate(args: argparse.Namespace) -> int:
    odo = read_odometry(args.odometry)
    inputs = _input_paths(args, ("displacements", "scans", "odometry", "init", "config"))
    out = Path(args.out)
    if args.method == "cam":
        from .cam import CamConfig, cam_calibrate

        if not args.scans:
            raise SchemaError("calibrate: --scans is required for --method cam")
        cfg = _options(args, CamConfig, {"huber_c": args.huber_c, "max_outer": args.max_iters,
                                         "huber": True if args.huber_c else None})
        res = cam_calibrate(read_scans(args.scans), odo, _load_init(args, odo.n_wheels), cfg)
        report = res.as_dict()
    else:
        if not args.displacements:
            raise SchemaError(f"calibrate: --displacements is required for --method {args.method}")
        obs = read_displacements(args.displacements)
        if args.method in ("gp", "linear"):
            model, report = _learned(args, obs, odo)
            man = make_manifest("calibrate", _run_config(args), args.seed, inputs)
            write_json(out / "model.json", model.to_dict(), man)
            write_json(out / "result.json", report, man)
            write_json(out / "manifest.json", man)
            return 0
        from .cirls import CirlsConfig, cirls_calibrate, cirls_cf_calibrate

        cfg = _options(args, CirlsConfig, {"huber_c": args.huber_c, "max_outer": args.max_iters})
        solve = cirls_cf_calibrate if args.method == "cirls-cf" else cirls_calibrate
        init = _load_init(args, odo.n_wheels)
        try:
            res = solve([o for o in obs if not o.flagged], odo, init, cfg)
        except ValueError as exc:
            raise SchemaError(f"calibrate: {exc}") from exc
        report = res.as_dict()
    man = make_manifest("calibrate", _run_config(args), args.seed, inputs)
    write_json(out / "result.json", report, man)
    write_json(out / "manifest.json", man)
    if not report.get("converged", True):
        # the estimate is still written so the iteration log can be inspected
        raise ConvergenceError(f"{args.method} stopped before converging; see result.json")
    return 0


def _load_any_model(path: str):
    from .modelfree import GPModel, LinearModel

    data = read_json(path)
    fmt = data.get("format")
    try:
        if fmt == "wheelcal-gp":
            return GPModel.from_dict(data)
        if fmt == "wheelcal-linear":
            return LinearModel.from_dict(data)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{Path(path).name}: {exc}") from exc
    return read_model(path)


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .metrics import Trajectory, evaluate, predict_trajectory

    model = _load_any_model(args.model)
    odo = read_odometry(args.odometry)
    t_ref, x_ref = read_trajectory(args.reference)
    ref = Trajectory(t_ref, x_ref)
    try:
        est = predict_trajectory(model, odo, times=t_ref, start=x_ref[0])
        rep = evaluate(est, ref)
    except ValueError as exc:
        raise SchemaError(f"evaluate: {exc}") from exc
    man = make_manifest("evaluate", _run_config(args), None, _input_paths(args, ("model", "odometry", "reference")))
    out = Path(args.out)
    write_json(out / "metrics.json", rep, man)
    rows = [(k, t_ref[k], t_ref[k + 1], rep["rpe_steps"][k], rep["ate_steps"][k + 1]) for k in range(len(t_ref) - 1)]
    write_csv(out / "errors.csv", ("step", "t_start", "t_end", "rpe_m", "ate_m"), rows, man)
    write_json(out / "manifest.json", man)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wheelcal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"wheelcal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")

    def initial(sp: argparse.ArgumentParser) -> None:
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--init", help="JSON model used as the starting point")
        g.add_argument("--nominal", choices=sorted(NOMINAL), help="built-in nominal model")

    s = sub.add_parser("simulate", help="generate a synthetic log from a JSON config")
    common(s)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("match", help="estimate sensor displacements from scan pairs")
    common(m)
    m.add_argument("--scans", required=True)
    m.add_argument("--odometry", required=True)
    m.add_argument("--keep-failures", action="store_true", help="keep failed pairs as flagged rows")
    initial(m)
    m.set_defaults(func=cmd_match)

    c = sub.add_parser("calibrate", help="estimate a sensor motion model")
    common(c)
    c.add_argument("--method", choices=METHODS, required=True)
    c.add_argument("--odometry", required=True)
    c.add_argument("--displacements")
    c.add_argument("--scans")
    c.add_argument("--config", help="JSON file of solver settings")
    c.add_argument("--huber-c", type=float, dest="huber_c")
    c.add_argument("--max-iters", type=int, dest="max_iters")
    c.add_argument("--kernel", choices=("rbf", "linear", "rbf+linear"), default="linear")
    c.add_argument("--gp-mean", choices=("zero", "linear"), default="linear", dest="gp_mean")
    initial(c)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="ATE and RPE of a model against a reference trajectory")
    common(e)
    e.add_argument("--model", required=True, help="result.json, model.json or truth.json")
    e.add_argument("--odometry", required=True)
    e.add_argument("--reference", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return args.func(args)
    except WheelcalError as exc:
        print(f"wheelcal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

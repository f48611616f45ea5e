"""Command-line interface: register, synth, bench, eval, convert.

Exit codes: 0 on success (for `register`, convergence), 1 on usage or input
errors, 2 on algorithmic non-convergence. The CLOUDALIGN_WORKERS environment
variable overrides the configured benchmark worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cloudalign.bench import (
    ExperimentConfig,
    FactorRanges,
    ROT_SUCCESS_MAX,
    TRANS_SUCCESS_MAX,
    run_experiment,
    summarize,
    synthesize_pair,
    SynthFactors,
    write_curve_files,
    write_summary_csv,
)
from cloudalign.fileio import (
    read_cloud,
    read_transform,
    read_xyz,
    write_cloud,
    write_transform,
    write_xyz,
)
from cloudalign.geometry import PointCloud, rotation_error, translation_error
from cloudalign.registration import (
    RegistrationConfig,
    RegistrationError,
    register,
)
from cloudalign.shapes import MODEL_NAMES, make_model
from cloudalign.solver import SolverOptions
from cloudalign.uncertainty import SensorModelParams

__all__ = ["main", "load_run_config"]

log = logging.getLogger(__name__)

WORKERS_ENV = "CLOUDALIGN_WORKERS"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2


class InputError(Exception):
    """Bad usage, unreadable file, or invalid configuration."""


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build_section(cls, data, section, skip=()):
    if not isinstance(data, dict):
        raise InputError(f"config section {section!r} must be an object")
    allowed = _fields(cls) - set(skip)
    unknown = set(data) - allowed
    if unknown:
        raise InputError(
            f"unknown keys in {section!r}: {sorted(unknown)}; allowed: {sorted(allowed)}"
        )
    return data


_TOP_KEYS = {
    "seed", "factor", "models_dir", "out_dir", "instances", "workers",
    "controlled_values", "registration", "ranges", "sensor",
}

_TOP_DEFAULTS = {
    "seed": 0,
    "factor": "init_rotation_deg",
    "models_dir": None,
    "out_dir": None,
    "instances": 3,
    "workers": 1,
    "controlled_values": None,
}


def load_run_config(path):
    """Parse the JSON run config; unknown keys anywhere are rejected."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as err:
        raise InputError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise InputError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise InputError(
            f"unknown config keys: {sorted(unknown)}; allowed: {sorted(_TOP_KEYS)}"
        )

    out = dict(_TOP_DEFAULTS)
    for key in _TOP_DEFAULTS:
        if key in data:
            out[key] = data[key]
    if out["controlled_values"] is not None:
        out["controlled_values"] = tuple(out["controlled_values"])

    reg_data = dict(_build_section(
        RegistrationConfig, data.get("registration", {}), "registration",
    ))
    solver_data = reg_data.pop("solver", None)
    try:
        if solver_data is not None:
            solver = SolverOptions(**_build_section(
                SolverOptions, solver_data, "registration.solver", skip=("bounds",)
            ))
            out["registration"] = RegistrationConfig(**reg_data, solver=solver)
        else:
            out["registration"] = RegistrationConfig(**reg_data)
        ranges_data = _build_section(FactorRanges, data.get("ranges", {}), "ranges")
        out["ranges"] = FactorRanges(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in ranges_data.items()
        })
        out["sensor"] = SensorModelParams(**_build_section(
            SensorModelParams, data.get("sensor", {}), "sensor"
        ))
    except (TypeError, ValueError) as err:
        raise InputError(f"invalid config value: {err}") from err
    return out


def _registration_config(config_path):
    if config_path is None:
        return RegistrationConfig()
    return load_run_config(config_path)["registration"]


def _load_model(source, seed):
    """A model is either a cloud file path or `builtin:<name>[:<target>]`."""
    if source.startswith("builtin:"):
        parts = source.split(":")
        name = parts[1] if len(parts) > 1 else ""
        if name not in MODEL_NAMES:
            raise InputError(
                f"unknown builtin model {name!r}; choose from {', '.join(MODEL_NAMES)}"
            )
        target = 1000
        if len(parts) > 2:
            try:
                target = int(parts[2])
            except ValueError:
                raise InputError(f"bad builtin target in {source!r}") from None
        return make_model(name, target=target, seed=seed)
    try:
        return read_cloud(source)
    except OSError as err:
        raise InputError(f"cannot read {source}: {err}") from err
    except ValueError as err:
        raise InputError(str(err)) from err


def _read_cloud_checked(path, identity_cov):
    try:
        cloud, had_covs = _read_cloud_with_flag(path)
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from err
    except ValueError as err:
        raise InputError(str(err)) from err
    if not had_covs and not identity_cov:
        raise InputError(
            f"{path} has no covariances; pass --identity-cov to substitute identity"
        )
    return cloud


def _read_cloud_with_flag(path):
    # the header's has_cov flag decides whether identity was substituted
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                parts = line.split()
                had = len(parts) == 4 and parts[3] == "1"
                return read_cloud(path), had
    raise ValueError(f"{path}: empty cloud file")


def cmd_register(args):
    fixed = _read_cloud_checked(args.fixed, args.identity_cov)
    moving = _read_cloud_checked(args.moving, args.identity_cov)
    if fixed.dim != moving.dim:
        raise InputError(
            f"dimension mismatch: {args.fixed} is {fixed.dim}D, "
            f"{args.moving} is {moving.dim}D"
        )
    config = _registration_config(args.config)
    try:
        result = register(fixed, moving, config)
    except ValueError as err:
        raise InputError(str(err)) from err
    except RegistrationError as err:
        log.error("registration failed: %s", err)
        return EXIT_NOT_CONVERGED

    comments = [
        f"converged={'true' if result.converged else 'false'}",
        f"iterations={result.iterations}",
        "trace: iteration sigma objective_start objective_end "
        "rot_increment trans_increment status",
    ]
    comments += [
        f"trace: {r.iteration} {r.sigma:.6g} {r.objective_start:.9g} "
        f"{r.objective_end:.9g} {r.rot_increment:.3e} {r.trans_increment:.3e} "
        f"{r.solver_status}"
        for r in result.trace
    ]
    write_transform(args.out, result.transform, comments=comments)
    log.info("wrote %s (converged=%s)", args.out, result.converged)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_synth(args):
    model = _load_model(args.model, args.seed)
    try:
        factors = SynthFactors(
            init_rotation_deg=args.rotation,
            outliers_count=args.outliers,
            noise_std_frac=args.noise,
            occlusion_frac=args.occlusion,
            sample_rate_fixed=args.sample_fixed,
            sample_rate_moving=args.sample_moving,
            translation_frac=args.translation,
        )
    except ValueError as err:
        raise InputError(str(err)) from err
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        fixed, moving, gt = synthesize_pair(model, factors, args.seed)
    except ValueError as err:
        raise InputError(str(err)) from err
    stamp = [f"seed={args.seed}", f"factors={factors}"]
    write_cloud(out_dir / "fixed.cloud", fixed, comments=stamp)
    write_cloud(out_dir / "moving.cloud", moving, comments=stamp)
    write_transform(out_dir / "gt_transform.txt", gt, comments=stamp)
    log.info("wrote pair under %s", out_dir)
    return EXIT_OK


def cmd_bench(args):
    config = load_run_config(args.config)
    if not config["models_dir"]:
        raise InputError("config must set models_dir")
    if not config["out_dir"]:
        raise InputError("config must set out_dir")
    models_dir = Path(config["models_dir"])
    if not models_dir.is_dir():
        raise InputError(f"models_dir {models_dir} is not a directory")
    model_paths = sorted(models_dir.glob("*.cloud"))
    if not model_paths:
        raise InputError(f"no *.cloud files under {models_dir}")
    try:
        models = [read_cloud(p) for p in model_paths]
    except ValueError as err:
        raise InputError(str(err)) from err

    workers = config["workers"]
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        try:
            workers = int(env_workers)
        except ValueError:
            raise InputError(f"{WORKERS_ENV} must be an integer") from None

    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    experiment = ExperimentConfig(
        seed=config["seed"],
        instances=config["instances"],
        workers=workers,
        registration=config["registration"],
        records_path=str(out_dir / "records.csv"),
        controlled_values=config["controlled_values"],
    )
    try:
        records = run_experiment(
            models, config["factor"], config["ranges"], experiment
        )
    except ValueError as err:
        raise InputError(str(err)) from err
    summaries = summarize(records)
    write_summary_csv(summaries, out_dir / "summary.csv")
    write_curve_files(summaries, out_dir)
    successes = sum(r.success for r in records)
    log.info(
        "%d trials, %d successes (%.1f%%); results under %s",
        len(records), successes, 100.0 * successes / len(records), out_dir,
    )
    return EXIT_OK


def cmd_eval(args):
    try:
        gt = read_transform(args.gt)
        est = read_transform(args.est)
    except (OSError, ValueError) as err:
        raise InputError(str(err)) from err
    if gt.rotation.shape != est.rotation.shape:
        raise InputError("transform dimensions differ")
    rot = rotation_error(gt.rotation, est.rotation)
    trans = translation_error(gt.translation, est.translation)
    success = rot < ROT_SUCCESS_MAX and trans < TRANS_SUCCESS_MAX
    print(f"rot_error={rot:.17g}")
    print(f"trans_error={trans:.17g}")
    print(f"success={'true' if success else 'false'}")
    return EXIT_OK


def cmd_convert(args):
    target = args.to
    if target is None:
        suffix = Path(args.dst).suffix.lower()
        target = "cloud" if suffix == ".cloud" else "xyz"
    if args.src.startswith("builtin:"):
        cloud = _load_model(args.src, args.seed)
        had_covs = True
    else:
        try:
            if Path(args.src).suffix.lower() == ".cloud":
                cloud, had_covs = _read_cloud_with_flag(args.src)
            else:
                cloud = PointCloud.with_identity_covariances(read_xyz(args.src))
                had_covs = False
        except OSError as err:
            raise InputError(f"cannot read {args.src}: {err}") from err
        except ValueError as err:
            raise InputError(str(err)) from err
    if target == "cloud":
        write_cloud(args.dst, cloud, with_covariances=had_covs)
    else:
        write_xyz(args.dst, cloud.points)
    log.info("wrote %s", args.dst)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cloudalign",
        description="Covariance-weighted rigid point-cloud registration "
                    "and its synthetic benchmark.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="align a moving cloud onto a fixed one")
    p.add_argument("fixed", help="fixed cloud file")
    p.add_argument("moving", help="moving cloud file")
    p.add_argument("--config", help="JSON run config (registration section used)")
    p.add_argument("--out", default="transform.txt",
                   help="output transform path (default: %(default)s)")
    p.add_argument("--identity-cov", action="store_true",
                   help="substitute identity covariances when a file has none")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="synthesize a degraded benchmark pair")
    p.add_argument("model", help="model cloud file or builtin:<name>[:<points>]")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotation", type=float, default=0.0,
                   help="pose offset angle in degrees (default: %(default)s)")
    p.add_argument("--outliers", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="noise std as a fraction of model radius")
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--sample-fixed", type=float, default=0.90)
    p.add_argument("--sample-moving", type=float, default=0.85)
    p.add_argument("--translation", type=float, default=0.1,
                   help="pose offset translation range, fraction of radius")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a factor sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score an estimated transform against truth")
    p.add_argument("gt", help="ground-truth transform file")
    p.add_argument("est", help="estimated transform file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="convert between xyz and cloud formats")
    p.add_argument("src", help="source file or builtin:<name>[:<points>]")
    p.add_argument("dst", help="destination file")
    p.add_argument("--to", choices=("cloud", "xyz"),
                   help="output format (default: by dst extension)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for builtin model generation")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InputError as err:
        print(f"cloudalign: error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

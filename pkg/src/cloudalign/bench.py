"""Synthetic-perturbation benchmark: pair synthesis, sweeps, aggregation.

A trial takes a model cloud, degrades two copies of it (occlusion, uneven
resampling, anisotropic noise, outliers), offsets the moving copy by a known
pose, registers, and scores the estimate. Sweeps vary one factor over a
controlled grid while the remaining factors are drawn from their random
ranges, with per-trial RNG streams derived from the sweep coordinates so
results never depend on execution order.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from cloudalign.geometry import (
    PointCloud,
    RigidTransform,
    apply_transform,
    bounding_radius,
    rotation_error,
    rotation_from_params,
    translation_error,
)
from cloudalign.registration import RegistrationConfig, register
from cloudalign.uncertainty import covariance_from_noise_std

__all__ = [
    "FACTOR_NAMES",
    "ROT_SUCCESS_MAX",
    "TRANS_SUCCESS_MAX",
    "RECORD_FIELDS",
    "FactorRanges",
    "SynthFactors",
    "ExperimentRecord",
    "ExperimentConfig",
    "ValueSummary",
    "draw_noise_stds",
    "occlusion_keep_mask",
    "synthesize_pair",
    "run_experiment",
    "summarize",
    "read_records_csv",
    "write_records_csv",
    "write_summary_csv",
    "write_curve_files",
]

log = logging.getLogger(__name__)

FACTOR_NAMES = (
    "init_rotation_deg",
    "outliers_count",
    "noise_std_frac",
    "occlusion_frac",
)

# a trial succeeds when both errors fall below these
ROT_SUCCESS_MAX = 0.2
TRANS_SUCCESS_MAX = 0.1

RECORD_FIELDS = (
    "factor_name",
    "factor_value",
    "shape_id",
    "instance_id",
    "rot_error",
    "trans_error",
    "success",
    "wall_time_s",
)

# smallest allowed noise std, as a fraction of model radius; keeps the
# recorded covariances positive definite when a drawn std lands near zero
NOISE_STD_FLOOR_FRAC = 1e-6

_OCCLUSION_MAX = 0.9


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step)) + 1
    return tuple(lo + k * step for k in range(n))


@dataclasses.dataclass(frozen=True)
class FactorRanges:
    """Sweep grids and nuisance-draw ranges for the four degradation factors."""

    init_rotation_deg_random: tuple = (-20.0, 20.0)
    init_rotation_deg_controlled: tuple = (-60.0, 60.0, 8.0)
    outliers_count_random: tuple = (0, 500)
    outliers_count_controlled: tuple = (0, 2000, 200)
    noise_std_frac_random: tuple = (0.0, 0.2)
    noise_std_frac_controlled: tuple = (0.0, 0.3, 0.03)
    occlusion_frac_random: tuple = (0.0, 0.15)
    occlusion_frac_controlled: tuple = (0.0, 0.3, 0.03)
    sample_rate_fixed: float = 0.90
    sample_rate_moving: float = 0.85
    translation_frac: float = 0.1

    def __post_init__(self):
        for name in FACTOR_NAMES:
            lo, hi = getattr(self, name + "_random")
            if lo > hi:
                raise ValueError(f"{name}_random not ordered: {lo} > {hi}")
            lo, hi, step = getattr(self, name + "_controlled")
            if lo > hi or step <= 0:
                raise ValueError(f"{name}_controlled invalid: ({lo}, {hi}, {step})")
        for name in ("noise_std_frac", "occlusion_frac"):
            for bound in (
                *getattr(self, name + "_random"),
                *getattr(self, name + "_controlled")[:2],
            ):
                if not 0.0 <= bound <= 1.0:
                    raise ValueError(f"{name} bound {bound} outside [0, 1]")
        for name in ("sample_rate_fixed", "sample_rate_moving"):
            rate = getattr(self, name)
            if not 0.0 < rate <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {rate}")
        if self.translation_frac < 0:
            raise ValueError("translation_frac must be >= 0")

    def controlled_values(self, factor_name):
        lo, hi, step = getattr(self, factor_name + "_controlled")
        values = _grid(lo, hi, step)
        if factor_name == "outliers_count":
            return tuple(int(round(v)) for v in values)
        return values

    def draw_random(self, factor_name, rng):
        lo, hi = getattr(self, factor_name + "_random")
        if factor_name == "outliers_count":
            return int(rng.integers(lo, hi + 1))
        return float(rng.uniform(lo, hi))


@dataclasses.dataclass(frozen=True)
class SynthFactors:
    """Concrete degradation settings for one synthesized pair."""

    init_rotation_deg: float = 0.0
    outliers_count: int = 0
    noise_std_frac: float = 0.0
    occlusion_frac: float = 0.0
    sample_rate_fixed: float = 0.90
    sample_rate_moving: float = 0.85
    translation_frac: float = 0.1

    def __post_init__(self):
        if self.outliers_count < 0:
            raise ValueError("outliers_count must be >= 0")
        if not 0.0 <= self.noise_std_frac <= 1.0:
            raise ValueError("noise_std_frac must be in [0, 1]")
        if not 0.0 <= self.occlusion_frac <= 1.0:
            raise ValueError("occlusion_frac must be in [0, 1]")
        for rate in (self.sample_rate_fixed, self.sample_rate_moving):
            if not 0.0 < rate <= 1.0:
                raise ValueError(f"sample rate {rate} outside (0, 1]")
        if self.translation_frac < 0:
            raise ValueError("translation_frac must be >= 0")

    @classmethod
    def for_sweep(cls, factor_name, value, ranges: FactorRanges, rng):
        """Fix the swept factor at `value`, draw the rest from random ranges."""
        if factor_name not in FACTOR_NAMES:
            raise ValueError(f"unknown factor {factor_name!r}")
        drawn = {
            name: ranges.draw_random(name, rng)
            for name in FACTOR_NAMES
            if name != factor_name
        }
        drawn[factor_name] = value
        return cls(
            sample_rate_fixed=ranges.sample_rate_fixed,
            sample_rate_moving=ranges.sample_rate_moving,
            translation_frac=ranges.translation_frac,
            **drawn,
        )


def occlusion_keep_mask(points, frac, rng):
    """Keep mask after cutting the `frac` of points deepest along a random direction."""
    n = points.shape[0]
    drop = int(round(frac * n))
    direction = rng.normal(size=points.shape[1])
    direction = direction / np.linalg.norm(direction)
    keep = np.ones(n, dtype=bool)
    if drop > 0:
        order = np.argsort(points @ direction, kind="stable")
        keep[order[n - drop:]] = False
    return keep


def draw_noise_stds(n, dim, frac, radius, rng):
    """Per-point per-axis stds, uniform on [0, frac*radius], floored for SPD."""
    stds = rng.uniform(0.0, frac * radius, size=(n, dim))
    return np.maximum(stds, NOISE_STD_FLOOR_FRAC * radius)


def _degrade(points, covariances, rate, factors, radius, rng):
    """Occlude, subsample, perturb one copy; returns arrays plus outlier count."""
    if factors.occlusion_frac > 0.0:
        if factors.occlusion_frac > _OCCLUSION_MAX:
            raise ValueError(
                f"occlusion_frac {factors.occlusion_frac} removes more than "
                f"{_OCCLUSION_MAX:.0%} of the model"
            )
        keep = occlusion_keep_mask(points, factors.occlusion_frac, rng)
        points, covariances = points[keep], covariances[keep]
    if rate < 1.0:
        k = int(round(rate * points.shape[0]))
        idx = np.sort(rng.choice(points.shape[0], size=k, replace=False))
        points, covariances = points[idx], covariances[idx]
    if factors.noise_std_frac > 0.0:
        stds = draw_noise_stds(
            points.shape[0], points.shape[1], factors.noise_std_frac, radius, rng
        )
        points = points + rng.normal(size=points.shape) * stds
        covariances = covariance_from_noise_std(stds)
    if factors.outliers_count > 0:
        center = 0.5 * (points.min(axis=0) + points.max(axis=0))
        half = 1.2 * 0.5 * (points.max(axis=0) - points.min(axis=0))
        extra = rng.uniform(center - half, center + half,
                            size=(factors.outliers_count, points.shape[1]))
        if factors.noise_std_frac > 0.0:
            extra_stds = draw_noise_stds(
                factors.outliers_count, points.shape[1],
                factors.noise_std_frac, radius, rng,
            )
            extra_covs = covariance_from_noise_std(extra_stds)
        else:
            donor = rng.integers(0, points.shape[0], size=factors.outliers_count)
            extra_covs = covariances[donor]
        points = np.concatenate([points, extra], axis=0)
        covariances = np.concatenate([covariances, extra_covs], axis=0)
    return points, covariances


def _draw_ground_truth(dim, factors, radius, rng):
    """Pose offset for the moving copy; returns the perturbation, not its inverse."""
    angle = np.deg2rad(factors.init_rotation_deg)
    if dim == 3:
        active = rng.random(3) < 0.5
        if not active.any():
            active[rng.integers(0, 3)] = True
        rotation = np.eye(3)
        for axis in range(3):
            if active[axis]:
                params = np.zeros(3)
                params[axis] = angle
                rotation = rotation @ rotation_from_params(params)
    elif dim == 2:
        rotation = rotation_from_params(np.array([angle]))
    else:
        raise ValueError(f"unsupported dimension {dim}")
    translation = rng.uniform(
        -factors.translation_frac, factors.translation_frac, size=dim
    ) * radius
    return RigidTransform(rotation, translation)


def synthesize_pair(model: PointCloud, factors: SynthFactors, seed):
    """Degrade two copies of `model` and offset the moving one.

    Returns (fixed, moving, gt) where `gt` maps the emitted moving cloud back
    onto the fixed cloud's frame, i.e. it is the transform a perfect
    registration of the pair would estimate.

    `seed` may be an int, an entropy tuple, or a Generator; one stream drives
    the whole pipeline, so equal seeds give bit-identical outputs.
    """
    if len(model) < 50:
        raise ValueError(f"model needs >= 50 points, got {len(model)}")
    rng = np.random.default_rng(seed)
    radius = bounding_radius(model.points)

    fixed_pts, fixed_covs = _degrade(
        model.points, model.covariances, factors.sample_rate_fixed,
        factors, radius, rng,
    )
    moving_pts, moving_covs = _degrade(
        model.points, model.covariances, factors.sample_rate_moving,
        factors, radius, rng,
    )
    fixed = PointCloud(fixed_pts, fixed_covs)
    moving = PointCloud(moving_pts, moving_covs)

    perturb = _draw_ground_truth(model.dim, factors, radius, rng)
    moving = apply_transform(moving, perturb)
    return fixed, moving, perturb.inverse()


@dataclasses.dataclass(frozen=True)
class ExperimentRecord:
    factor_name: str
    factor_value: float
    shape_id: int
    instance_id: int
    rot_error: float
    trans_error: float
    success: bool
    wall_time_s: float

    @classmethod
    def from_errors(cls, factor_name, factor_value, shape_id, instance_id,
                    rot_error, trans_error, wall_time_s):
        return cls(
            factor_name=factor_name,
            factor_value=float(factor_value),
            shape_id=int(shape_id),
            instance_id=int(instance_id),
            rot_error=float(rot_error),
            trans_error=float(trans_error),
            success=bool(rot_error < ROT_SUCCESS_MAX and trans_error < TRANS_SUCCESS_MAX),
            wall_time_s=float(wall_time_s),
        )

    def key(self):
        return (self.factor_name, _fmt(self.factor_value), self.shape_id, self.instance_id)


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    instances: int = 3
    workers: int = 1
    registration: RegistrationConfig = dataclasses.field(
        default_factory=RegistrationConfig
    )
    records_path: str | None = None        # append-only CSV enabling resume
    controlled_values: tuple | None = None  # override the sweep grid


def _fmt(x):
    return format(float(x), ".17g")


def _record_row(rec: ExperimentRecord):
    return [
        rec.factor_name,
        _fmt(rec.factor_value),
        str(rec.shape_id),
        str(rec.instance_id),
        _fmt(rec.rot_error),
        _fmt(rec.trans_error),
        "true" if rec.success else "false",
        _fmt(rec.wall_time_s),
    ]


def _parse_row(row):
    if len(row) != len(RECORD_FIELDS):
        raise ValueError(f"expected {len(RECORD_FIELDS)} columns, got {len(row)}")
    return ExperimentRecord(
        factor_name=row[0],
        factor_value=float(row[1]),
        shape_id=int(row[2]),
        instance_id=int(row[3]),
        rot_error=float(row[4]),
        trans_error=float(row[5]),
        success={"true": True, "false": False}[row[6]],
        wall_time_s=float(row[7]),
    )


def read_records_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(RECORD_FIELDS):
            raise ValueError(f"unexpected records header: {header}")
        for row in reader:
            records.append(_parse_row(row))
    return records


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            writer.writerow(_record_row(rec))


class _Appender:
    """Serialized record sink; writes the header once, flushes every row."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            new = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = open(self.path, "a", newline="")
            self._writer = csv.writer(self._fh)
            if new:
                self._writer.writerow(RECORD_FIELDS)
                self._fh.flush()

    def append(self, rec):
        if self._fh is not None:
            self._writer.writerow(_record_row(rec))
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def run_trial(model, factor_name, value, value_index, shape_id, instance_id,
              ranges, config):
    """Synthesize, register, score one trial; failures become non-success records."""
    entropy = (config.seed, FACTOR_NAMES.index(factor_name), value_index,
               shape_id, instance_id)
    rng = np.random.default_rng(entropy)
    started = time.perf_counter()
    try:
        factors = SynthFactors.for_sweep(factor_name, value, ranges, rng)
        fixed, moving, gt = synthesize_pair(model, factors, rng)
        result = register(fixed, moving, config.registration)
        rot = rotation_error(gt.rotation, result.transform.rotation)
        trans = translation_error(gt.translation, result.transform.translation)
    except Exception:
        log.warning(
            "trial failed: factor=%s value=%s shape=%d instance=%d",
            factor_name, value, shape_id, instance_id, exc_info=True,
        )
        rot, trans = np.inf, np.inf
    wall = time.perf_counter() - started
    return ExperimentRecord.from_errors(
        factor_name, value, shape_id, instance_id, rot, trans, wall
    )


def _trial_args(args):
    return run_trial(*args)


def run_experiment(models, factor_name, ranges: FactorRanges,
                   config: ExperimentConfig):
    """Sweep one factor over its controlled grid: every value x shape x instance.

    Resumable: records already present in `config.records_path` are kept and
    their trials skipped. Returns all records in sweep order.
    """
    if factor_name not in FACTOR_NAMES:
        raise ValueError(f"unknown factor {factor_name!r}")
    if not models:
        raise ValueError("need at least one model")
    values = (tuple(config.controlled_values)
              if config.controlled_values is not None
              else ranges.controlled_values(factor_name))

    done = {}
    if config.records_path is not None and Path(config.records_path).exists():
        for rec in read_records_csv(config.records_path):
            done[rec.key()] = rec

    tasks = []
    for value_index, value in enumerate(values):
        for shape_id in range(1, len(models) + 1):
            for instance_id in range(1, config.instances + 1):
                tasks.append((value_index, value, shape_id, instance_id))

    def probe(task):
        value_index, value, shape_id, instance_id = task
        return (factor_name, _fmt(value), shape_id, instance_id)

    pending = [t for t in tasks if probe(t) not in done]
    appender = _Appender(config.records_path)
    fresh = {}
    try:
        if config.workers > 1 and pending:
            payloads = [
                (models[shape_id - 1], factor_name, value, value_index,
                 shape_id, instance_id, ranges, config)
                for value_index, value, shape_id, instance_id in pending
            ]
            with concurrent.futures.ProcessPoolExecutor(config.workers) as pool:
                for task, rec in zip(pending, pool.map(_trial_args, payloads)):
                    appender.append(rec)
                    fresh[probe(task)] = rec
        else:
            for task in pending:
                value_index, value, shape_id, instance_id = task
                rec = run_trial(models[shape_id - 1], factor_name, value,
                                value_index, shape_id, instance_id, ranges, config)
                appender.append(rec)
                fresh[probe(task)] = rec
    finally:
        appender.close()

    return [done.get(probe(t)) or fresh[probe(t)] for t in tasks]


@dataclasses.dataclass(frozen=True)
class ValueSummary:
    factor_name: str
    factor_value: float
    trials: int
    successes: int
    success_rate: float
    rot_error_mean: float
    rot_error_std: float
    trans_error_mean: float
    trans_error_std: float
    wall_time_mean: float


SUMMARY_FIELDS = tuple(f.name for f in dataclasses.fields(ValueSummary))


def summarize(records):
    """Per-(factor, value) aggregates; error and time stats over successes only."""
    if not records:
        raise ValueError("no records to summarize")
    groups = {}
    for rec in records:
        groups.setdefault((rec.factor_name, rec.factor_value), []).append(rec)
    out = []
    for (name, value) in sorted(groups):
        recs = groups[(name, value)]
        ok = [r for r in recs if r.success]
        if ok:
            rot = np.array([r.rot_error for r in ok])
            trans = np.array([r.trans_error for r in ok])
            wall = np.array([r.wall_time_s for r in ok])
            stats = (rot.mean(), rot.std(), trans.mean(), trans.std(), wall.mean())
        else:
            stats = (np.nan,) * 5
        out.append(ValueSummary(
            factor_name=name,
            factor_value=value,
            trials=len(recs),
            successes=len(ok),
            success_rate=len(ok) / len(recs),
            rot_error_mean=float(stats[0]),
            rot_error_std=float(stats[1]),
            trans_error_mean=float(stats[2]),
            trans_error_std=float(stats[3]),
            wall_time_mean=float(stats[4]),
        ))
    return out


def write_summary_csv(summaries, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_FIELDS)
        for s in summaries:
            writer.writerow([
                s.factor_name, _fmt(s.factor_value), str(s.trials),
                str(s.successes), _fmt(s.success_rate),
                _fmt(s.rot_error_mean), _fmt(s.rot_error_std),
                _fmt(s.trans_error_mean), _fmt(s.trans_error_std),
                _fmt(s.wall_time_mean),
            ])


_CURVE_METRICS = ("success_rate", "rot_error_mean", "trans_error_mean",
                  "wall_time_mean")


def write_curve_files(summaries, out_dir):
    """One whitespace-delimited file per metric per factor, for gnuplot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    by_factor = {}
    for s in summaries:
        by_factor.setdefault(s.factor_name, []).append(s)
    for factor, rows in by_factor.items():
        for metric in _CURVE_METRICS:
            path = out_dir / f"{factor}_{metric}.dat"
            with open(path, "w") as fh:
                fh.write(f"# {factor} {metric}\n")
                for s in rows:
                    fh.write(f"{_fmt(s.factor_value)} {_fmt(getattr(s, metric))}\n")
            written.append(path)
    return written

"""Alternating registration of two covariance-carrying clouds.

Each outer iteration refreshes the coupling between the clouds at their
current relative pose (freezing the pair coefficients and rescaling the
moving cloud's covariances by the mean nearest-neighbor gap), then solves for
the rigid increment minimizing the frozen-coefficient loss. Increments
compose onto the running transform until both the step objective and the pose
increment stop moving.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy.spatial import cKDTree

from cloudalign.energy import (
    EnergyContext,
    PairCoefficients,
    _inverses_logdets,
    _pair_values,
    objective,
    objective_gradient,
)
from cloudalign.geometry import (
    PointCloud,
    PoseParams,
    RigidTransform,
    bounding_radius,
    compose,
)
from cloudalign.solver import MinimizeResult, SolverError, SolverOptions, minimize

__all__ = [
    "RegistrationConfig",
    "RegistrationState",
    "IterationRecord",
    "RegistrationResult",
    "RegistrationError",
    "mean_min_distance",
    "e_step",
    "register",
]

log = logging.getLogger(__name__)

# below this many reference points a brute-force scan beats building a tree
_BRUTE_FORCE_LIMIT = 128


def _default_solver_options() -> SolverOptions:
    # the pose subproblem is tiny; step-based exits dominate near convergence
    return SolverOptions(max_iters=40, grad_tol=1e-12, step_tol=1e-11)


@dataclasses.dataclass
class RegistrationConfig:
    max_iterations: int = 100          # outer alternation budget
    objective_tol: float = 1e-6        # relative change of the step objective
    step_tol: float = 1e-5             # increment angle + translation / radius
    scale_covariances: bool = True     # rescale moving covariances by the mean gap
    compound_scaling: bool = False     # accumulate the gap scale across iterations
    sigma_floor_factor: float = 1e-3   # lower bound on the gap scale, times radius
    cov_floor_factor: float = 0.04     # eigenvalue floor on input spreads, times radius
    max_rotation_step: float = 0.5     # per-iteration cap on each rotation parameter
    max_translation_step: float = 0.5  # per-iteration translation cap, times radius
    solver: SolverOptions = dataclasses.field(default_factory=_default_solver_options)


@dataclasses.dataclass(frozen=True)
class IterationRecord:
    iteration: int
    sigma: float
    objective_start: float
    objective_end: float
    rot_increment: float
    trans_increment: float
    solver_status: str


@dataclasses.dataclass
class RegistrationResult:
    transform: RigidTransform
    converged: bool
    iterations: int
    trace: list


class RegistrationError(RuntimeError):
    """Registration could not proceed; carries the trace gathered so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


def mean_min_distance(moving_points, fixed_points) -> float:
    """Mean distance from each moving point to its nearest fixed point."""
    moving = np.asarray(moving_points, dtype=float)
    fixed = np.asarray(fixed_points, dtype=float)
    if moving.ndim != 2 or fixed.ndim != 2 or moving.shape[1] != fixed.shape[1]:
        raise ValueError("point arrays must be (n, d) with matching d")
    if moving.shape[0] == 0 or fixed.shape[0] == 0:
        raise ValueError("point arrays must be non-empty")
    if fixed.shape[0] < _BRUTE_FORCE_LIMIT:
        diffs = moving[:, None, :] - fixed[None, :, :]
        dists = np.sqrt((diffs**2).sum(axis=2)).min(axis=1)
    else:
        dists, _ = cKDTree(fixed).query(moving)
    return float(dists.mean())


def _floor_covariances(cloud: PointCloud, floor_variance: float) -> PointCloud:
    """Clip covariance eigenvalues from below, keeping the eigenvectors.

    Spreads much narrower than the scene scale add no usable alignment
    information but blow up both the pair-weight prefactors and the quadratic
    stiffness; clipping bounds the dynamic range of the loss.
    """
    vals, vecs = np.linalg.eigh(cloud.covariances)
    if float(vals.min()) >= floor_variance:
        return cloud
    vals = np.maximum(vals, floor_variance)
    covs = np.einsum("nab,nb,ncb->nac", vecs, vals, vecs)
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    return PointCloud(cloud.points, covs)


class _Cache:
    """Per-registration constants shared across iterations."""

    def __init__(self, fixed: PointCloud, moving_base: PointCloud):
        self.A, self.logdet_x = _inverses_logdets(fixed.covariances)
        self.B0, self.logdet_y0 = _inverses_logdets(moving_base.covariances)
        self.radius = bounding_radius(fixed.points)
        self.tree = (
            cKDTree(fixed.points)
            if len(fixed) >= _BRUTE_FORCE_LIMIT
            else None
        )
        self.B_current = self.B0


@dataclasses.dataclass
class RegistrationState:
    """Snapshot of the alternation: cumulative pose plus per-step products."""

    fixed: PointCloud
    moving_base: PointCloud
    config: RegistrationConfig
    transform: RigidTransform
    iteration: int = 0
    sigma: float | None = None
    cov_scale: float = 1.0
    moving_current: PointCloud | None = None
    coeffs: PairCoefficients | None = None
    cache: _Cache | None = dataclasses.field(default=None, repr=False)

    @classmethod
    def initial(
        cls, fixed: PointCloud, moving: PointCloud, config: RegistrationConfig
    ) -> "RegistrationState":
        if fixed.dim != moving.dim:
            raise ValueError(
                f"cloud dimensions differ: {fixed.dim} vs {moving.dim}"
            )
        if config.cov_floor_factor > 0.0:
            floor_var = (config.cov_floor_factor * bounding_radius(fixed.points)) ** 2
            fixed = _floor_covariances(fixed, floor_var)
            moving = _floor_covariances(moving, floor_var)
        return cls(
            fixed=fixed,
            moving_base=moving,
            config=config,
            transform=RigidTransform.identity(fixed.dim),
        )


def e_step(state: RegistrationState) -> RegistrationState:
    """Refresh the coupling at the current pose.

    Moves the base cloud by the cumulative transform, rescales its (rotated)
    covariances by the mean nearest-neighbor gap (floored at a small fraction
    of the fixed cloud's radius), and freezes new pair coefficients, rescaled
    so the peak weight is one.
    """
    cache = state.cache or _Cache(state.fixed, state.moving_base)
    config = state.config
    T = state.transform
    R = T.rotation
    d = state.fixed.dim

    y_current = T.apply(state.moving_base.points)
    if cache.tree is not None:
        sigma_raw = float(cache.tree.query(y_current)[0].mean())
    else:
        sigma_raw = mean_min_distance(y_current, state.fixed.points)
    sigma = max(sigma_raw, config.sigma_floor_factor * cache.radius)

    if not config.scale_covariances:
        scale = 1.0
    elif config.compound_scaling:
        # the compounded product decays geometrically once aligned; keep it
        # above the same floor as sigma so the coefficients stay representable
        scale = max(state.cov_scale * sigma, config.sigma_floor_factor * cache.radius)
    else:
        scale = sigma

    covs = scale * np.einsum("ab,nbc,dc->nad", R, state.moving_base.covariances, R)
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    moving_current = PointCloud(y_current, covs)

    B_cur = (1.0 / scale) * np.einsum("ab,nbc,dc->nad", R, cache.B0, R)
    B_cur = 0.5 * (B_cur + np.transpose(B_cur, (0, 2, 1)))
    logdet_y = cache.logdet_y0 + d * np.log(scale)
    values = _pair_values(
        state.fixed.points, cache.A, cache.logdet_x, y_current, B_cur, logdet_y
    )
    peak = float(values.max())
    if not np.isfinite(peak) or peak <= 0.0:
        raise RegistrationError(
            f"degenerate coupling at iteration {state.iteration + 1}: "
            f"peak pair weight is {peak!r}"
        )
    # the increment minimizing the frozen-coefficient loss is unchanged by a
    # positive rescaling of the coefficients; dividing by the peak keeps the
    # loss and its gradient representable when sharp spreads inflate the weights
    values /= peak
    cache.B_current = B_cur

    return dataclasses.replace(
        state,
        iteration=state.iteration + 1,
        sigma=sigma,
        cov_scale=scale,
        moving_current=moving_current,
        coeffs=PairCoefficients(values, computed_at=state.iteration + 1),
        cache=cache,
    )


def _m_step(state: RegistrationState) -> tuple[PoseParams, MinimizeResult]:
    """Minimize the frozen-coefficient loss over a pose increment."""
    ctx = EnergyContext(
        state.fixed,
        state.moving_current,
        state.coeffs,
        _precomputed=(state.cache.A, state.cache.B_current),
    )
    dim = state.fixed.dim

    def f(v):
        return objective(PoseParams.from_vector(v, dim), ctx)

    def g(v):
        return objective_gradient(PoseParams.from_vector(v, dim), ctx)

    x0 = PoseParams.identity(dim).to_vector()
    opts = state.config.solver
    if opts.bounds is None:
        # cap each increment so one overconfident coupling cannot launch the
        # cloud far outside the basin; the outer loop covers large poses by
        # accumulating capped steps
        hi = np.concatenate(
            [
                np.full(x0.size - dim, state.config.max_rotation_step),
                np.full(dim, state.config.max_translation_step * state.cache.radius),
            ]
        )
        opts = dataclasses.replace(opts, bounds=(-hi, hi))
    result = minimize(f, g, x0, opts)
    return PoseParams.from_vector(result.x, dim), result


def register(
    fixed: PointCloud, moving: PointCloud, config: RegistrationConfig | None = None
) -> RegistrationResult:
    """Estimate the rigid transform carrying `moving` onto `fixed`.

    Alternates coupling refreshes with pose-increment solves until the step
    objective and the increment both settle, or the iteration budget runs out
    (reported through `converged`).
    """
    config = config or RegistrationConfig()
    state = RegistrationState.initial(fixed, moving, config)
    if bounding_radius(fixed.points) == 0.0 or bounding_radius(moving.points) == 0.0:
        raise ValueError("degenerate cloud: all points coincide")

    radius = None
    trace: list[IterationRecord] = []
    prev_f = None
    converged = False
    for _ in range(config.max_iterations):
        try:
            state = e_step(state)
        except RegistrationError as err:
            err.trace = list(trace)
            raise
        if radius is None:
            radius = state.cache.radius
        try:
            params, res = _m_step(state)
        except SolverError as err:
            raise RegistrationError(
                f"pose solve failed at iteration {state.iteration}: {err}", trace
            ) from err
        increment = params.to_transform()
        state = dataclasses.replace(
            state, transform=compose(state.transform, increment)
        )
        rot_inc = float(np.linalg.norm(params.rot))
        trans_inc = float(np.linalg.norm(params.trans))
        trace.append(
            IterationRecord(
                iteration=state.iteration,
                sigma=state.sigma,
                objective_start=float(res.f_history[0]),
                objective_end=res.f,
                rot_increment=rot_inc,
                trans_increment=trans_inc,
                solver_status=res.status.value,
            )
        )
        step_size = rot_inc + trans_inc / radius
        if prev_f is not None:
            rel_change = abs(res.f - prev_f) / max(abs(prev_f), 1e-300)
            if rel_change < config.objective_tol and step_size < config.step_tol:
                converged = True
                break
        prev_f = res.f

    log.debug(
        "registration finished: converged=%s iterations=%d", converged, len(trace)
    )
    return RegistrationResult(
        transform=state.transform,
        converged=converged,
        iterations=len(trace),
        trace=trace,
    )

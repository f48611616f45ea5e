"""Mixture-overlap energy for covariance-weighted cloud alignment.

Each cloud is treated as a mixture of per-point anisotropic Gaussians. An
alignment step freezes a matrix of pair coefficients (how strongly point i of
the fixed cloud and point j of the moving cloud currently explain each other)
and minimizes the coefficient-weighted sum of blended squared Mahalanobis
distances over a rigid motion of the moving cloud.

The pose objective here is algebraically identical to the naive double sum

    sum_ij c_ij * (R y_j + t - x_i)^T (Sx_i^-1 + R Sy_j^-1 R^T) (R y_j + t - x_i)

but is evaluated through per-point moment aggregates so one evaluation costs
O((n + m) d^3) instead of O(n m d^2). `oracle_expected_loss` keeps the slow
pointwise route for cross-checking.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from cloudalign.geometry import (
    PointCloud,
    PoseParams,
    rotation_derivatives,
    rotation_from_params,
)

__all__ = [
    "PairCoefficients",
    "EnergyContext",
    "GridSpec",
    "gaussian_kernel",
    "proximity_weight",
    "pair_coefficients",
    "objective",
    "objective_gradient",
    "oracle_expected_loss",
    "oracle_energy_grid",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_cov(cov, dim=None):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    if dim is not None and cov.shape[0] != dim:
        raise ValueError(f"covariance dimension {cov.shape[0]} != point dimension {dim}")
    if not np.isfinite(cov).all():
        raise ValueError("covariance must be finite")
    return cov


def gaussian_kernel(tau, point, cov):
    """Normalized anisotropic Gaussian density at tau.

    tau may be a single position (d,) or a batch (k, d); returns a float or a
    (k,) array accordingly.
    """
    point = np.asarray(point, dtype=float).reshape(-1)
    cov = _check_cov(cov, point.size)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    tau = np.asarray(tau, dtype=float)
    single = tau.ndim == 1
    diff = np.atleast_2d(tau) - point
    q = np.einsum("ka,ka->k", diff, np.linalg.solve(cov, diff.T).T)
    log_norm = -0.5 * point.size * LOG_2PI - 0.5 * logdet
    with np.errstate(under="ignore"):
        vals = np.exp(log_norm - 0.5 * q)
    return float(vals[0]) if single else vals


def proximity_weight(tau, candidate, cov):
    """Unnormalized closeness of a candidate companion point to tau.

    Equals 1 when the candidate sits at tau and decays with the squared
    Mahalanobis distance under cov. Never exceeds 1.
    """
    tau = np.asarray(tau, dtype=float).reshape(-1)
    candidate = np.asarray(candidate, dtype=float).reshape(-1)
    cov = _check_cov(cov, tau.size)
    diff = candidate - tau
    q = float(diff @ np.linalg.solve(cov, diff))
    with np.errstate(under="ignore"):
        return float(np.exp(-0.5 * q))


@dataclasses.dataclass(frozen=True)
class PairCoefficients:
    """Frozen (n, m) coupling weights between two clouds.

    computed_at tags the outer-loop iteration the weights were taken from.
    """

    values: np.ndarray
    computed_at: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"values must be a 2-d array, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValueError("coefficients must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _inverses_logdets(covs):
    """Batched inverses and log-determinants of (k, d, d) SPD matrices."""
    inv = np.linalg.inv(covs)
    inv = 0.5 * (inv + np.transpose(inv, (0, 2, 1)))
    sign, logdet = np.linalg.slogdet(covs)
    if (sign <= 0).any():
        raise ValueError("covariances must be positive definite")
    return inv, logdet


def _pair_values(X, A, logdet_x, Y, B, logdet_y):
    """Coefficient matrix from raw arrays.

    A, B are the inverse covariances of the two clouds. Exponentials are
    evaluated in log space; entries whose exponent falls below the smallest
    representable magnitude flush to exact zero.
    """
    n, d = X.shape
    m = Y.shape[0]
    ax = np.einsum("nab,nb->na", A, X)
    qxx = np.einsum("na,na->n", ax, X)
    yy = np.einsum("ma,mb->mab", Y, Y).reshape(m, d * d)
    q_fixed = qxx[:, None] - 2.0 * (ax @ Y.T) + A.reshape(n, d * d) @ yy.T
    by = np.einsum("mab,mb->ma", B, Y)
    qyy = np.einsum("ma,ma->m", by, Y)
    xx = np.einsum("na,nb->nab", X, X).reshape(n, d * d)
    q_moving = xx @ B.reshape(m, d * d).T - 2.0 * (X @ by.T) + qyy[None, :]
    log_pref = -d * LOG_2PI - 0.5 * (logdet_x[:, None] + logdet_y[None, :])
    with np.errstate(under="ignore"):
        return np.exp(log_pref - 0.5 * q_fixed) + np.exp(log_pref - 0.5 * q_moving)


def pair_coefficients(
    fixed: PointCloud, moving_current: PointCloud, iteration: int = 0
) -> PairCoefficients:
    """Coupling weights between the fixed cloud and the moving cloud as posed now.

    Entry (i, j) is the product of the two Gaussian peak heights times the sum
    of the two cross proximity factors, so it is symmetric under exchanging
    the clouds and invariant under moving both clouds rigidly together.
    """
    if fixed.dim != moving_current.dim:
        raise ValueError("clouds must share a dimension")
    A, ldx = _inverses_logdets(fixed.covariances)
    B, ldy = _inverses_logdets(moving_current.covariances)
    values = _pair_values(fixed.points, A, ldx, moving_current.points, B, ldy)
    return PairCoefficients(values, computed_at=iteration)


class EnergyContext:
    """Per-step frozen data for the pose objective.

    Holds the fixed cloud, the moving cloud in its current pose (the base the
    pose increment is applied to), the frozen pair coefficients, and the
    moment aggregates that make objective evaluations cheap.
    """

    def __init__(
        self,
        fixed: PointCloud,
        moving_base: PointCloud,
        coeffs: PairCoefficients,
        _precomputed=None,
    ):
        if fixed.dim != moving_base.dim:
            raise ValueError("clouds must share a dimension")
        if coeffs.values.shape != (len(fixed), len(moving_base)):
            raise ValueError(
                f"coefficient shape {coeffs.values.shape} does not match clouds "
                f"({len(fixed)}, {len(moving_base)})"
            )
        self.fixed = fixed
        self.moving_base = moving_base
        self.coeffs = coeffs
        self.dim = fixed.dim

        X = fixed.points
        Y = moving_base.points
        C = coeffs.values
        n, d = X.shape
        m = Y.shape[0]
        if _precomputed is not None:
            A, B = _precomputed
        else:
            A = _inverses_logdets(fixed.covariances)[0]
            B = _inverses_logdets(moving_base.covariances)[0]

        self._X = X
        self._Y = Y
        self._A = A
        # row moments over the moving cloud, one set per fixed point
        self._s = C.sum(axis=1)
        self._m1 = C @ Y
        self._M2 = (C @ np.einsum("ma,mb->mab", Y, Y).reshape(m, d * d)).reshape(
            n, d, d
        )
        self._ax = np.einsum("nab,nb->na", A, X)
        self._S_A = np.einsum("n,nab->ab", self._s, A)
        self._v_A = np.einsum("n,na->a", self._s, self._ax)
        self._c_x = float(self._s @ np.einsum("na,na->n", self._ax, X))
        # column-side aggregates under the moving cloud's own metrics
        by = np.einsum("mab,mb->ma", B, Y)
        qyy = np.einsum("ma,ma->m", by, Y)
        self._const_y = float(C.sum(axis=0) @ qyy)
        self._g = C @ by
        self._H = (C @ B.reshape(m, d * d)).reshape(n, d, d)

    def __len__(self):
        return len(self.fixed)


def _pose_arrays(params: PoseParams, dim: int):
    if params.dim != dim:
        raise ValueError(f"pose dimension {params.dim} != context dimension {dim}")
    return rotation_from_params(params.rot), params.trans


def objective(params: PoseParams, ctx: EnergyContext) -> float:
    """Coefficient-weighted blended squared Mahalanobis loss at the given pose."""
    R, t = _pose_arrays(params, ctx.dim)
    A, X = ctx._A, ctx._X
    Rm = ctx._m1 @ R.T
    r = np.einsum("nab,nb->a", A, Rm)
    u = float(np.einsum("na,na->", ctx._ax, Rm))
    W1 = np.einsum("nab,bc,ncd->ad", A, R, ctx._M2, optimize=True)
    z = (X - t) @ R
    Hz = np.einsum("nab,nb->na", ctx._H, z)
    loss_fixed_metric = (
        float((R * W1).sum())
        + 2.0 * float(t @ r)
        - 2.0 * u
        + float(t @ ctx._S_A @ t)
        - 2.0 * float(t @ ctx._v_A)
        + ctx._c_x
    )
    loss_moving_metric = (
        ctx._const_y - 2.0 * float((z * ctx._g).sum()) + float((z * Hz).sum())
    )
    return loss_fixed_metric + loss_moving_metric


def objective_gradient(params: PoseParams, ctx: EnergyContext) -> np.ndarray:
    """Analytic gradient of `objective` in the rotation-vector + translation order."""
    R, t = _pose_arrays(params, ctx.dim)
    A, X = ctx._A, ctx._X
    Rm = ctx._m1 @ R.T
    r = np.einsum("nab,nb->a", A, Rm)
    W1 = np.einsum("nab,bc,ncd->ad", A, R, ctx._M2, optimize=True)
    z = (X - t) @ R
    Hz = np.einsum("nab,nb->na", ctx._H, z)

    grad_t = 2.0 * (r + ctx._S_A @ t - ctx._v_A) + 2.0 * R @ (ctx._g - Hz).sum(axis=0)

    at = np.einsum("nab,nb->na", A, t - X)
    G = W1 + at.T @ ctx._m1 + (X - t).T @ (Hz - ctx._g)
    dR = rotation_derivatives(params.rot)
    grad_rot = 2.0 * np.einsum("kab,ab->k", dR, G)
    return np.concatenate([grad_rot, grad_t])


def oracle_expected_loss(params: PoseParams, ctx: EnergyContext) -> float:
    """Slow pointwise reference for `objective`.

    Walks every pair, rebuilds the posed covariance of the moving point,
    inverts both covariances afresh, and accumulates the blended squared
    Mahalanobis distance evaluated at the pair's two data points, each
    carrying the pair's frozen coefficient. Exists purely to cross-check the
    aggregated fast path.
    """
    R, t = _pose_arrays(params, ctx.dim)
    X = ctx.fixed.points
    Y = ctx.moving_base.points
    cov_x = ctx.fixed.covariances
    cov_y = ctx.moving_base.covariances
    C = ctx.coeffs.values
    total = 0.0
    for i in range(X.shape[0]):
        inv_x = np.linalg.inv(cov_x[i])
        for j in range(Y.shape[0]):
            y_new = R @ Y[j] + t
            inv_y = np.linalg.inv(R @ cov_y[j] @ R.T)
            S = inv_x + inv_y
            for tau in (X[i], y_new):
                dx = tau - X[i]
                dy = tau - y_new
                mah = 0.5 * (dx @ S @ dx) + 0.5 * (dy @ S @ dy)
                total += C[i, j] * mah
    return float(total)


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Axis-aligned evaluation grid: cell centers of counts[k] cells per axis."""

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        counts = tuple(int(c) for c in self.counts)
        if not (lower.size == upper.size == len(counts)):
            raise ValueError("lower, upper, and counts must share a length")
        if (upper <= lower).any() or any(c < 1 for c in counts):
            raise ValueError("grid must have positive extent and counts")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "counts", counts)

    def cell_centers(self):
        axes = [
            np.linspace(lo, hi, c, endpoint=False) + (hi - lo) / (2 * c)
            for lo, hi, c in zip(self.lower, self.upper, self.counts)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def cell_volume(self):
        return float(
            np.prod((self.upper - self.lower) / np.asarray(self.counts, dtype=float))
        )


def oracle_energy_grid(
    fixed: PointCloud, moving_current: PointCloud, grid: GridSpec
) -> float:
    """Quadrature estimate of the overlap energy of the two mixtures.

    Integrates pair_density * log(blended mixture of fixed * blended mixture
    of moving) over the grid. Each mixture term is gated by the proximity of
    its best candidate companion from the other cloud. Test-only diagnostic:
    the value grows as the clouds align.
    """
    if fixed.dim != moving_current.dim or fixed.dim != grid.lower.size:
        raise ValueError("grid and clouds must share a dimension")
    taus = grid.cell_centers()
    k = taus.shape[0]

    def mixture(cloud, other):
        total = np.zeros(k)
        for i in range(len(cloud)):
            dens = gaussian_kernel(taus, cloud.points[i], cloud.covariances[i])
            inv = np.linalg.inv(cloud.covariances[i])
            diffs = taus[:, None, :] - other.points[None, :, :]
            q = np.einsum("kma,ab,kmb->km", diffs, inv, diffs)
            with np.errstate(under="ignore"):
                gate = np.exp(-0.5 * q.min(axis=1))
            total += gate * dens
        return total

    def density_sum(cloud):
        total = np.zeros(k)
        for i in range(len(cloud)):
            total += gaussian_kernel(taus, cloud.points[i], cloud.covariances[i])
        return total

    pair_density = density_sum(fixed) * density_sum(moving_current)
    gx = mixture(fixed, moving_current)
    gy = mixture(moving_current, fixed)
    mask = (pair_density > 0) & (gx > 0) & (gy > 0)
    vals = pair_density[mask] * (np.log(gx[mask]) + np.log(gy[mask]))
    return float(vals.sum() * grid.cell_volume)

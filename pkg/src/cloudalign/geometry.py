"""Rigid-motion primitives and the covariance-carrying point-cloud container.

Rotations are parameterized by a rotation vector (axis * angle) in 3-D and by
a single angle in 2-D, so the pose search space is unconstrained.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "PointCloud",
    "RigidTransform",
    "PoseParams",
    "rotation_from_params",
    "rot_params_from_matrix",
    "rotation_derivatives",
    "apply_transform",
    "compose",
    "rotation_error",
    "translation_error",
    "bounding_radius",
    "skew",
]

# eigenvalues below this fraction of the mean diagonal are treated as singular
EIG_FLOOR_FACTOR = 1e-12
_SYM_TOL = 1e-12
_ORTHO_TOL = 1e-10


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def skew(v):
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_from_params(rot_params) -> np.ndarray:
    """Rotation matrix from a rotation vector (3-D) or a single angle (2-D)."""
    w = np.asarray(rot_params, dtype=float).reshape(-1)
    if w.size == 1:
        c, s = np.cos(w[0]), np.sin(w[0])
        return np.array([[c, -s], [s, c]])
    if w.size != 3:
        raise ValueError(f"rotation parameters must have length 1 or 3, got {w.size}")
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order series keeps orthogonality to machine precision here
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def rot_params_from_matrix(R) -> np.ndarray:
    """Rotation vector (3-D) or angle (2-D) recovering the given matrix.

    The returned angle lies in [0, pi]; vectors equivalent modulo 2*pi are not
    preserved, the matrix is.
    """
    R = np.asarray(R, dtype=float)
    if R.shape == (2, 2):
        return np.array([np.arctan2(R[1, 0], R[0, 0])])
    if R.shape != (3, 3):
        raise ValueError(f"expected a 2x2 or 3x3 rotation, got {R.shape}")
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta > 1e-6:
        axis = np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        ) / (2.0 * np.sin(theta))
        return axis * theta
    # near pi the skew part degenerates; use the dominant column of R + I
    M = R + np.eye(3)
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / np.sqrt(2.0 * M[k, k])
    axis /= np.linalg.norm(axis)
    # fix the sign so the off-diagonal skew part matches
    s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.dot(axis, s) < 0:
        axis = -axis
    return axis * theta


def rotation_derivatives(rot_params) -> np.ndarray:
    """Stack of dR/dw_k for the rotation-vector (or angle) parameterization.

    Returns an array of shape (n_params, d, d).
    """
    w = np.asarray(rot_params, dtype=float).reshape(-1)
    if w.size == 1:
        c, s = np.cos(w[0]), np.sin(w[0])
        return np.array([[[-s, -c], [c, -s]]])
    if w.size != 3:
        raise ValueError(f"rotation parameters must have length 1 or 3, got {w.size}")
    theta = np.linalg.norm(w)
    K = skew(w)
    K2 = K @ K
    E = [skew(e) for e in np.eye(3)]
    if theta < 1e-4:
        # series for sin(t)/t, (1-cos t)/t^2 and their differentials in w
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0  # (d a / d theta) / theta
        db = -1.0 / 12.0 + t2 / 180.0
    else:
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        a = sin_t / theta
        b = (1.0 - cos_t) / theta**2
        da = (theta * cos_t - sin_t) / theta**3
        db = (theta * sin_t - 2.0 * (1.0 - cos_t)) / theta**4
    out = np.empty((3, 3, 3))
    for k in range(3):
        out[k] = (
            da * w[k] * K
            + a * E[k]
            + db * w[k] * K2
            + b * (E[k] @ K + K @ E[k])
        )
    return out


def rotation_error(R_gt, R_est) -> float:
    """Frobenius distance between identity and the relative rotation.

    Equals 2*sqrt(2)*sin(theta/2) for a relative rotation of angle theta.
    """
    R_gt = np.asarray(R_gt, dtype=float)
    R_est = np.asarray(R_est, dtype=float)
    d = R_gt.shape[0]
    return float(np.linalg.norm(np.eye(d) - R_gt @ R_est.T, ord="fro"))


def translation_error(t_gt, t_est) -> float:
    """Euclidean distance between two translation vectors."""
    return float(np.linalg.norm(np.asarray(t_gt, float) - np.asarray(t_est, float)))


def bounding_radius(points) -> float:
    """Half the diagonal of the axis-aligned bounding box."""
    points = np.asarray(points, dtype=float)
    return 0.5 * float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


@dataclasses.dataclass(frozen=True)
class PointCloud:
    """Immutable point set with one SPD covariance matrix per point.

    points: (n, d) positions, d in {2, 3}
    covariances: (n, d, d) symmetric positive-definite matrices

    Construction validates shapes, symmetry, and positive-definiteness: every
    eigenvalue must exceed EIG_FLOOR_FACTOR * trace / d for its matrix.
    """

    points: np.ndarray
    covariances: np.ndarray

    def __post_init__(self, _validate=True):
        pts = np.array(self.points, dtype=float)
        covs = np.array(self.covariances, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must be a non-empty (n, d) array, got {pts.shape}")
        n, d = pts.shape
        if d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {d}")
        if covs.shape != (n, d, d):
            raise ValueError(
                f"covariances must have shape {(n, d, d)}, got {covs.shape}"
            )
        if not np.isfinite(pts).all() or not np.isfinite(covs).all():
            raise ValueError("points and covariances must be finite")
        asym = np.abs(covs - np.transpose(covs, (0, 2, 1))).max()
        if asym > _SYM_TOL * max(1.0, float(np.abs(covs).max())):
            raise ValueError(f"covariances must be symmetric (max asymmetry {asym:g})")
        covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
        eigs = np.linalg.eigvalsh(covs)
        floors = EIG_FLOOR_FACTOR * np.trace(covs, axis1=1, axis2=2) / d
        bad = eigs[:, 0] <= floors
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"covariance {i} is singular or indefinite "
                f"(min eigenvalue {eigs[i, 0]:g}, floor {floors[i]:g})"
            )
        pts.setflags(write=False)
        covs.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "covariances", covs)

    @classmethod
    def with_identity_covariances(cls, points) -> "PointCloud":
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise ValueError(f"points must be (n, d), got {points.shape}")
        n, d = points.shape
        covs = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        return cls(points, covs)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        d = t.size
        if R.shape != (d, d) or d not in (2, 3):
            raise ValueError(
                f"rotation {R.shape} incompatible with translation of length {d}"
            )
        if np.abs(R.T @ R - np.eye(d)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls, dim: int) -> "RigidTransform":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.translation.size

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying `first`, then `second`."""
    if first.dim != second.dim:
        raise ValueError("cannot compose transforms of different dimensions")
    return RigidTransform(
        second.rotation @ first.rotation,
        second.rotation @ first.translation + second.translation,
    )


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Move a cloud rigidly: positions R p + t, covariances R S R^T."""
    if cloud.dim != transform.dim:
        raise ValueError(
            f"cloud dimension {cloud.dim} != transform dimension {transform.dim}"
        )
    R = transform.rotation
    pts = cloud.points @ R.T + transform.translation
    covs = np.einsum("ab,nbc,dc->nad", R, cloud.covariances, R)
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    return PointCloud(pts, covs)


@dataclasses.dataclass(frozen=True)
class PoseParams:
    """Flat pose parameterization used by the optimizer.

    rot: rotation vector (3,) in 3-D or angle (1,) in 2-D
    trans: translation (d,)
    """

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rot = _readonly(np.asarray(self.rot, dtype=float).reshape(-1))
        trans = _readonly(np.asarray(self.trans, dtype=float).reshape(-1))
        if trans.size not in (2, 3):
            raise ValueError(f"translation must have length 2 or 3, got {trans.size}")
        expected = 1 if trans.size == 2 else 3
        if rot.size != expected:
            raise ValueError(
                f"rotation parameters must have length {expected} for "
                f"dimension {trans.size}, got {rot.size}"
            )
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "trans", trans)

    @classmethod
    def identity(cls, dim: int) -> "PoseParams":
        return cls(np.zeros(1 if dim == 2 else 3), np.zeros(dim))

    @classmethod
    def from_vector(cls, vec, dim: int) -> "PoseParams":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        n_rot = 1 if dim == 2 else 3
        if vec.size != n_rot + dim:
            raise ValueError(f"expected a vector of length {n_rot + dim}, got {vec.size}")
        return cls(vec[:n_rot], vec[n_rot:])

    @property
    def dim(self) -> int:
        return self.trans.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])

    def to_transform(self) -> RigidTransform:
        return RigidTransform(rotation_from_params(self.rot), self.trans)

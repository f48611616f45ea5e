"""Uncertainty model for points measured by a depth camera.

A measurement taken at viewing angle alpha (between the surface normal and
the ray back to the sensor) and depth d is assigned the multiplicative
uncertainty

    u(alpha, d) = exp(w_angle * (1 - cos(alpha)) + w_depth * d)

so a head-on, zero-depth measurement has uncertainty 1 and the value grows
with grazing views and with range. The default weights make a 60-degree view
and a 3-unit depth equally uncertain (both about 2.3).
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "SensorModelParams",
    "sensor_uncertainty",
    "covariance_from_uncertainty",
    "covariance_from_noise_std",
]


@dataclasses.dataclass(frozen=True)
class SensorModelParams:
    w_angle: float = 1.6658
    w_depth: float = 0.2776

    @classmethod
    def from_calibration(cls, c: float) -> "SensorModelParams":
        """Weights pinned so u(pi/3, 0) == u(0, 3) == c, with c in [1, 10]."""
        if not 1.0 <= c <= 10.0:
            raise ValueError(f"calibration constant must be in [1, 10], got {c}")
        log_c = float(np.log(c))
        # 1 - cos(pi/3) = 1/2 anchors the angle weight; depth anchor is 3 units
        return cls(w_angle=2.0 * log_c, w_depth=log_c / 3.0)


_DEFAULT = SensorModelParams()


def sensor_uncertainty(
    angle: float, depth: float, params: SensorModelParams = _DEFAULT
) -> float:
    """Multiplicative uncertainty of a depth measurement.

    angle is the viewing angle in radians, valid on [0, pi/2); depth must be
    non-negative. Result is >= 1 for non-negative weights.
    """
    angle = float(angle)
    depth = float(depth)
    if not 0.0 <= angle < np.pi / 2:
        raise ValueError(f"viewing angle must lie in [0, pi/2), got {angle}")
    if depth < 0.0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    return float(np.exp(params.w_angle * (1.0 - np.cos(angle)) + params.w_depth * depth))


def covariance_from_uncertainty(u: float, dim: int) -> np.ndarray:
    """Isotropic covariance u * I for a point with scalar uncertainty u."""
    u = float(u)
    if u <= 0.0:
        raise ValueError(f"uncertainty must be positive, got {u}")
    if dim not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {dim}")
    return np.eye(dim) * u


def covariance_from_noise_std(stds) -> np.ndarray:
    """Diagonal covariance with the squared per-axis noise deviations.

    Accepts one (d,) vector or a batch (n, d); returns (d, d) or (n, d, d).
    """
    stds = np.asarray(stds, dtype=float)
    if (stds <= 0).any() or not np.isfinite(stds).all():
        raise ValueError("noise standard deviations must be positive and finite")
    if stds.ndim == 1:
        return np.diag(stds**2)
    if stds.ndim == 2:
        n, d = stds.shape
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = stds**2
        return out
    raise ValueError(f"expected a (d,) or (n, d) array, got shape {stds.shape}")

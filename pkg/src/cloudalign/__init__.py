"""Rigid point-cloud registration driven by per-point anisotropic covariances."""

from cloudalign.geometry import (
    PointCloud,
    PoseParams,
    RigidTransform,
    apply_transform,
    compose,
    rotation_error,
    translation_error,
)

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "PoseParams",
    "RigidTransform",
    "apply_transform",
    "compose",
    "rotation_error",
    "translation_error",
    "__version__",
]

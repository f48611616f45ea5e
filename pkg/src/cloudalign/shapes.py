"""Procedural desk-scale surface models for the benchmark harness.

Five faceted rigid assemblies, each normalized to bounding radius 1 and
downsampled to roughly a target point count. Per-point covariances are
isotropic at the scale of the local sample spacing, standing in for the
measurement footprint of a real sensor.

Every model is a sparse assembly of thin sheets and rods chosen so that no
rotation slides the shape along itself: surface area is balanced across
several distinct normals, and parts are separated by empty space at the
scale of the model. Surfaces of revolution and space-filling solids are
avoided on purpose because they map nearly onto themselves under rotation,
which makes pose recovery ill-posed rather than merely hard.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from cloudalign.geometry import PointCloud, bounding_radius

__all__ = ["MODEL_NAMES", "make_model", "model_suite", "voxel_downsample"]

MODEL_NAMES = ("corner", "wave", "fan", "gable", "truss")

# raw samples drawn per requested output point, before voxel thinning
_OVERSAMPLE = 8


def _box_surface(count, half, rng):
    """Sample `count` points uniformly by area on a cuboid surface."""
    hx, hy, hz = half
    face_area = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    counts = rng.multinomial(count, face_area / face_area.sum())
    rows = []
    for face, cnt in enumerate(counts):
        axis, sign = divmod(face, 2)
        pts = rng.uniform(-1.0, 1.0, (cnt, 3)) * np.asarray(half)
        pts[:, axis] = (1.0 if sign else -1.0) * half[axis]
        rows.append(pts)
    return np.concatenate(rows, axis=0)


def _assemble(n, rng, parts):
    """Sample a list of (center, half_extents, rotation | None) cuboids.

    The budget is split by surface area so the sampling density is uniform
    across the whole assembly.
    """
    areas = np.array(
        [8.0 * (h[0] * h[1] + h[1] * h[2] + h[2] * h[0]) for _, h, _ in parts]
    )
    counts = rng.multinomial(n, areas / areas.sum())
    rows = []
    for (center, half, rot), cnt in zip(parts, counts):
        pts = _box_surface(cnt, half, rng)
        if rot is not None:
            pts = pts @ np.asarray(rot, dtype=float).T
        rows.append(pts + np.asarray(center, dtype=float))
    return np.concatenate(rows, axis=0)


def _tilt(axis, degrees):
    return Rotation.from_euler(axis, degrees, degrees=True).as_matrix()


def _sample_corner(n, rng):
    # three mutually perpendicular slabs of comparable area, set apart so
    # none touches, plus one rod; no normal direction dominates
    parts = [
        ((0.10, 0.05, 0.00), (0.35, 0.28, 0.02), None),
        ((0.52, -0.05, 0.35), (0.02, 0.26, 0.33), None),
        ((-0.15, 0.42, 0.38), (0.30, 0.02, 0.30), None),
        ((-0.35, -0.25, 0.30), (0.025, 0.025, 0.30), None),
    ]
    return _assemble(n, rng, parts)


def _sample_wave(n, rng):
    # corrugated sheet whose amplitude grows across the straight direction,
    # so neither sliding along the ridges nor any rotation maps it to itself
    sheet_n = int(round(0.88 * n))
    u = rng.uniform(-0.5, 0.5, sheet_n)
    v = rng.uniform(-0.5, 0.5, sheet_n)
    z = 0.22 * np.sin(2.6 * np.pi * (u + 0.5)) * (1.0 + 0.5 * v)
    sheet = np.column_stack([u, v, z])
    post = _box_surface(n - sheet_n, (0.02, 0.02, 0.16), rng)
    post += np.array([0.42, 0.38, 0.24])
    return np.concatenate([sheet, post], axis=0)


def _sample_fan(n, rng):
    # hub rod with three thin blades of unequal size at irregular angles
    parts = [
        ((0.0, 0.0, 0.0), (0.03, 0.03, 0.42), None),
        ((0.30, 0.0, 0.12), (0.28, 0.015, 0.14), None),
        ((-0.08, 0.26, -0.10), (0.22, 0.012, 0.11), _tilt("z", 105.0)),
        ((-0.22, -0.18, 0.28), (0.17, 0.012, 0.17), _tilt("z", 212.0)),
    ]
    return _assemble(n, rng, parts)


def _sample_gable(n, rng):
    # two roof sheets meeting at an asymmetric ridge, an end wall whose
    # normal follows the ridge, and a chimney stub
    parts = [
        ((0.00, 0.21, 0.18), (0.40, 0.24, 0.015), _tilt("x", -42.0)),
        ((0.00, -0.18, 0.15), (0.40, 0.21, 0.015), _tilt("x", 55.0)),
        ((0.42, 0.02, -0.08), (0.015, 0.24, 0.22), None),
        ((-0.25, 0.05, 0.38), (0.035, 0.035, 0.12), None),
    ]
    return _assemble(n, rng, parts)


def _sample_truss(n, rng):
    # zigzag of three rods with two unequal gusset sheets at the joints,
    # gusset normals pointing in different directions
    parts = [
        ((-0.35, 0.00, 0.00), (0.025, 0.025, 0.30), None),
        ((0.00, 0.05, 0.26), (0.30, 0.025, 0.025), _tilt("y", 28.0)),
        ((0.35, -0.05, 0.05), (0.025, 0.30, 0.025), _tilt("x", -20.0)),
        ((-0.33, 0.02, 0.33), (0.14, 0.012, 0.14), _tilt("z", 30.0)),
        ((0.34, -0.02, -0.28), (0.11, 0.11, 0.012), _tilt("y", -35.0)),
    ]
    return _assemble(n, rng, parts)


_GENERATORS = {
    "corner": _sample_corner,
    "wave": _sample_wave,
    "fan": _sample_fan,
    "gable": _sample_gable,
    "truss": _sample_truss,
}


def voxel_downsample(points, target, tol=0.10, max_bisect=60):
    """Thin a point set to `target` points (within `tol`) on a voxel grid.

    Each occupied voxel is replaced by the centroid of its points; the voxel
    edge is bisected until the count lands inside the tolerance band.
    Deterministic: output rows are ordered by voxel index.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be (n, d)")
    n = pts.shape[0]
    if target < 1:
        raise ValueError("target must be >= 1")
    band = max(1.0, tol * target)
    if abs(n - target) <= band:
        return pts.copy()
    if n < target:
        raise ValueError(f"cannot reach {target} points from {n}")

    origin = pts.min(axis=0) - 1e-12
    span = float(np.max(pts.max(axis=0) - origin))

    def centroids(edge):
        idx = np.floor((pts - origin) / edge).astype(np.int64)
        keys, inverse = np.unique(idx, axis=0, return_inverse=True)
        sums = np.zeros((keys.shape[0], pts.shape[1]))
        np.add.at(sums, inverse, pts)
        counts = np.bincount(inverse, minlength=keys.shape[0])
        return sums / counts[:, None]

    lo, hi = span * 1e-6, span  # lo keeps ~all points, hi collapses them
    best = None
    best_gap = np.inf
    for _ in range(max_bisect):
        edge = np.sqrt(lo * hi)
        cand = centroids(edge)
        gap = abs(cand.shape[0] - target)
        if gap < best_gap:
            best, best_gap = cand, gap
        if gap <= band:
            return cand
        if cand.shape[0] > target:
            lo = edge
        else:
            hi = edge
    if best_gap <= band:
        return best
    raise ValueError(
        f"voxel bisection stalled at {best.shape[0]} points for target {target}"
    )


def make_model(name, target=1000, seed=0, cov_spacing_factor=1.0) -> PointCloud:
    """Build one named model: normalized, thinned, with spacing-scale covariances."""
    try:
        generator = _GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}") from None
    rng = np.random.default_rng((seed, MODEL_NAMES.index(name)))
    raw = generator(_OVERSAMPLE * target, rng)
    pts = voxel_downsample(raw, target)

    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    pts = (pts - center) / bounding_radius(pts)

    spacing = float(cKDTree(pts).query(pts, k=2)[0][:, 1].mean())
    std = cov_spacing_factor * spacing
    covs = np.broadcast_to(std**2 * np.eye(3), (pts.shape[0], 3, 3)).copy()
    return PointCloud(pts, covs)


def model_suite(target=1000, seed=0, cov_spacing_factor=1.0):
    """All five models in registry order."""
    return [
        make_model(name, target=target, seed=seed, cov_spacing_factor=cov_spacing_factor)
        for name in MODEL_NAMES
    ]

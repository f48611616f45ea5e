"""Plain-text on-disk formats: point clouds, rigid transforms, bare xyz rows.

Cloud files carry a `v1 <dim> <count> <has_cov>` header line followed by one
point per line: the coordinates, then (when the flag is set) the upper
triangle of the covariance in row-major order. Lines starting with '#' are
comments. Floats are written with 17 significant digits so a write/read
round trip is lossless.
"""

from __future__ import annotations

import numpy as np

from cloudalign.geometry import PointCloud, RigidTransform

__all__ = [
    "read_cloud",
    "write_cloud",
    "read_transform",
    "write_transform",
    "read_xyz",
    "write_xyz",
]

_FORMAT_VERSION = "v1"


def _fmt(x):
    return format(float(x), ".17g")


def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _upper_indices(dim):
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def read_cloud(path) -> PointCloud:
    """Parse a cloud file; covariances become identity when the flag is 0."""
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ValueError(f"{path}: empty cloud file") from None
    parts = header.split()
    if len(parts) != 4 or parts[0] != _FORMAT_VERSION:
        raise ValueError(
            f"{path}:{lineno}: expected header '{_FORMAT_VERSION} <dim> <count> "
            f"<has_cov>', got {header!r}"
        )
    try:
        dim, count, flag = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise ValueError(f"{path}:{lineno}: non-integer header fields") from None
    if dim not in (2, 3):
        raise ValueError(f"{path}:{lineno}: unsupported dimension {dim}")
    if count < 1:
        raise ValueError(f"{path}:{lineno}: point count must be >= 1")
    if flag not in (0, 1):
        raise ValueError(f"{path}:{lineno}: has_cov flag must be 0 or 1")

    n_cov = dim * (dim + 1) // 2 if flag else 0
    width = dim + n_cov
    pts = np.empty((count, dim))
    covs = np.empty((count, dim, dim)) if flag else None
    upper = _upper_indices(dim)

    row = 0
    for lineno, line in lines:
        if row >= count:
            raise ValueError(f"{path}:{lineno}: more rows than the declared {count}")
        fields = line.split()
        if len(fields) != width:
            raise ValueError(
                f"{path}:{lineno}: expected {width} values, got {len(fields)}"
            )
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
        pts[row] = values[:dim]
        if flag:
            for (i, j), v in zip(upper, values[dim:]):
                covs[row, i, j] = v
                covs[row, j, i] = v
        row += 1
    if row != count:
        raise ValueError(f"{path}: declared {count} points but found {row}")

    if flag:
        return PointCloud(pts, covs)
    return PointCloud.with_identity_covariances(pts)


def write_cloud(path, cloud: PointCloud, with_covariances=True, comments=()):
    """Write a cloud file; `comments` become leading '#' lines."""
    dim = cloud.dim
    upper = _upper_indices(dim)
    with open(path, "w") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        fh.write(f"{_FORMAT_VERSION} {dim} {len(cloud)} {int(bool(with_covariances))}\n")
        for k in range(len(cloud)):
            fields = [_fmt(v) for v in cloud.points[k]]
            if with_covariances:
                fields += [_fmt(cloud.covariances[k, i, j]) for i, j in upper]
            fh.write(" ".join(fields) + "\n")


def read_transform(path) -> RigidTransform:
    """Parse a transform file: D rows of a rotation matrix, then the translation."""
    rows = []
    for lineno, line in _data_lines(path):
        fields = line.split()
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise ValueError(f"{path}: empty transform file")
    dim = len(rows[0])
    if dim not in (2, 3) or len(rows) != dim + 1:
        raise ValueError(
            f"{path}: expected {dim}x{dim} rotation rows plus one translation row"
        )
    if any(len(r) != dim for r in rows):
        raise ValueError(f"{path}: ragged rows")
    rotation = np.array(rows[:dim])
    translation = np.array(rows[dim])
    return RigidTransform(rotation, translation)


def write_transform(path, transform: RigidTransform, comments=()):
    with open(path, "w") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        for row in transform.rotation:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
        fh.write(" ".join(_fmt(v) for v in transform.translation) + "\n")


def read_xyz(path) -> np.ndarray:
    """Parse bare coordinate rows (2 or 3 per line, consistent)."""
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        fields = line.split()
        if width is None:
            width = len(fields)
            if width not in (2, 3):
                raise ValueError(
                    f"{path}:{lineno}: expected 2 or 3 coordinates, got {width}"
                )
        elif len(fields) != width:
            raise ValueError(
                f"{path}:{lineno}: inconsistent column count ({len(fields)} vs {width})"
            )
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise ValueError(f"{path}: no points found")
    return np.array(rows)


def write_xyz(path, points, comments=()):
    pts = np.asarray(points, dtype=float)
    with open(path, "w") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        for row in pts:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")

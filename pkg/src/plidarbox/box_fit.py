"""Baseline 3D box estimation from a frustum point cloud.

The footprint is the minimum-area rotated rectangle of the (x, z) convex
hull; the vertical extent is taken directly from the y range. This is a
deterministic geometric stand-in for a learned amodal box estimator and is
intentionally conservative: it encloses every input point.
"""
from __future__ import annotations

import math

import numpy as np

from .boxes import Box3D, normalize_angle
from .errors import DegenerateInputError, InvalidInputError
from .pseudolidar import PointCloud


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Convex hull of 2D points (Andrew monotone chain), CCW, no collinear runs."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(points: np.ndarray):
    """Minimum-area rectangle enclosing 2D points.

    Scans the hull edges (the optimal rectangle has a side collinear with
    one of them) and keeps the first strictly smallest area, which makes
    the result deterministic.

    Returns:
        ``(center, (len_u, len_v), direction)`` where ``direction`` is the
        unit vector of the rectangle side with extent ``len_u``.

    Raises:
        DegenerateInputError: fewer than 3 non-collinear points.
    """
    hull = convex_hull_2d(points)
    if len(hull) < 3:
        raise DegenerateInputError("need at least 3 non-collinear points")
    best = None
    edges = np.roll(hull, -1, axis=0) - hull
    for edge in edges:
        norm = math.hypot(edge[0], edge[1])
        if norm == 0.0:
            continue
        u = edge / norm
        v = np.array([-u[1], u[0]])
        pu = hull @ u
        pv = hull @ v
        lo_u, hi_u = pu.min(), pu.max()
        lo_v, hi_v = pv.min(), pv.max()
        area = (hi_u - lo_u) * (hi_v - lo_v)
        if best is None or area < best[0]:
            center = 0.5 * ((lo_u + hi_u) * u + (lo_v + hi_v) * v)
            best = (area, center, (hi_u - lo_u, hi_v - lo_v), u)
    _, center, extents, direction = best
    return center, extents, direction


def fit_box_baseline(cloud: PointCloud) -> Box3D:
    """Fit an enclosing oriented box to a frustum cloud.

    The heading is measured along the longer footprint side (``l >= w`` by
    convention) and normalized to (-pi, pi].

    Raises:
        DegenerateInputError: fewer than 3 non-collinear BEV points.
    """
    if len(cloud) < 3:
        raise DegenerateInputError("need at least 3 points to fit a box")
    bev = cloud.points[:, [0, 2]]
    center, (len_u, len_v), u_dir = min_area_rect(bev)
    if min(len_u, len_v) <= 1e-9:
        raise DegenerateInputError("BEV points are collinear")
    if len_u >= len_v:
        l, w = len_u, len_v
        direction = u_dir
    else:
        l, w = len_v, len_u
        direction = np.array([-u_dir[1], u_dir[0]])
    # rot_y maps the local +x (length) axis to BEV direction (cos t, -sin t)
    theta = normalize_angle(math.atan2(-direction[1], direction[0]))
    y_lo = cloud.points[:, 1].min()
    y_hi = cloud.points[:, 1].max()
    return Box3D(
        x=center[0],
        y=0.5 * (y_lo + y_hi),
        z=center[1],
        h=y_hi - y_lo,
        w=w,
        l=l,
        theta=theta,
    )


def trim_outliers(cloud: PointCloud, k: float) -> PointCloud:
    """Symmetrically trim the points farthest in depth from the median.

    Removes up to ``floor(k * N)`` points on each side of the median z (the
    largest and the smallest depths), so at least ``N - 2 * floor(k * N)``
    points remain. Points within 1e-9 of the median are never removed, which
    keeps depth-homogeneous clouds untouched.
    """
    if not 0.0 <= k < 0.5:
        raise InvalidInputError("trim fraction must lie in [0, 0.5)")
    if len(cloud) == 0:
        raise InvalidInputError("cannot trim an empty cloud")
    n_cut = int(k * len(cloud))
    if n_cut == 0:
        return cloud
    z = cloud.points[:, 2]
    med = float(np.median(z))
    order = np.argsort(z, kind="stable")
    drop = np.zeros(len(cloud), dtype=bool)
    low = order[:n_cut]
    drop[low[z[low] < med - 1e-9]] = True
    high = order[len(cloud) - n_cut:]
    drop[high[z[high] > med + 1e-9]] = True
    pixels = cloud.pixels[~drop] if cloud.pixels is not None else None
    return PointCloud(points=cloud.points[~drop], pixels=pixels)

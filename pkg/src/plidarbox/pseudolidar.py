"""Lift depth maps into pseudo-LiDAR point clouds and carve per-proposal frustums.

Every valid depth pixel unprojects to one 3D point. Points are emitted in
row-major pixel scan order so downstream hashing and golden tests are
stable, and each point can carry its source pixel as provenance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .boxes import Rect
from .camera import CameraIntrinsics, CameraPose, camera_to_world, unproject
from .errors import InvalidInputError


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or v.shape != d.shape:
            raise InvalidInputError("depth and valid must be matching 2D grids")
        masked = d[v]
        if masked.size and (not np.all(np.isfinite(masked)) or np.any(masked <= 0)):
            raise InvalidInputError("valid pixels must have positive, finite depth")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        """Build from a raw grid; non-positive or non-finite entries are invalid."""
        d = np.asarray(depth, dtype=np.float64)
        return cls(depth=d, valid=np.isfinite(d) & (d > 0))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel instance ids; 0 is background, ids need not be contiguous."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise InvalidInputError("instance map must be a 2D grid")
        object.__setattr__(self, "ids", ids.astype(np.int32))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def instance_ids(self) -> np.ndarray:
        """Sorted distinct instance ids (background excluded)."""
        u = np.unique(self.ids)
        return u[u > 0]


@dataclass(frozen=True)
class PointCloud:
    """3D points in meters with optional per-point source-pixel provenance."""

    points: np.ndarray
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud must be finite")
        object.__setattr__(self, "points", pts)
        if self.pixels is not None:
            px = np.asarray(self.pixels).reshape(-1, 2)
            if len(px) != len(pts):
                raise InvalidInputError("provenance must have one entry per point")
            object.__setattr__(self, "pixels", px)

    def __len__(self) -> int:
        return len(self.points)


def _lift(depth: DepthMap, select: np.ndarray, intr: CameraIntrinsics,
          pose: Optional[CameraPose] = None) -> PointCloud:
    rows, cols = np.nonzero(select)
    if rows.size == 0:
        return PointCloud(points=np.empty((0, 3)), pixels=np.empty((0, 2), dtype=np.int64))
    pixels = np.stack([cols, rows], axis=1)
    pts = unproject(pixels.astype(np.float64), depth.depth[rows, cols], intr)
    if pose is not None:
        pts = camera_to_world(pts, pose)
    return PointCloud(points=pts, pixels=pixels.astype(np.int64))


def generate_pseudolidar(depth: DepthMap, intr: CameraIntrinsics,
                         pose: Optional[CameraPose] = None) -> PointCloud:
    """Unproject every valid pixel of a depth map into a point cloud.

    With a pose the points are additionally mapped into world coordinates.
    An all-invalid map yields an empty cloud.
    """
    return _lift(depth, depth.valid, intr, pose)


def extract_frustum_mask(depth: DepthMap, mask: InstanceMap, instance_id: int,
                         intr: CameraIntrinsics) -> PointCloud:
    """Lift exactly the valid pixels whose mask value equals ``instance_id``."""
    if instance_id <= 0:
        raise InvalidInputError("instance id must be positive")
    if mask.ids.shape != depth.depth.shape:
        raise InvalidInputError("mask and depth dimensions must match")
    return _lift(depth, depth.valid & (mask.ids == instance_id), intr)


def extract_frustum_box(depth: DepthMap, rect: Rect, intr: CameraIntrinsics) -> PointCloud:
    """Lift all valid pixels inside a half-open pixel rectangle.

    A pixel (u, v) belongs to the frustum when ``rect.x <= u < rect.x + rect.w``
    and ``rect.y <= v < rect.y + rect.h``.
    """
    h, w = depth.depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    in_u = (u >= rect.x) & (u < rect.x + rect.w)
    in_v = (v >= rect.y) & (v < rect.y + rect.h)
    select = depth.valid & in_v[:, None] & in_u[None, :]
    return _lift(depth, select, intr)


def sample_points(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Deterministically sample a fixed number of points from a cloud.

    When the cloud holds at least ``n`` points, samples uniformly without
    replacement. Smaller clouds keep every point and are padded up to ``n``
    with uniformly drawn duplicates. Selected indices are sorted so the
    output preserves the cloud's scan order.
    """
    if n <= 0:
        raise InvalidInputError("sample count must be positive")
    if len(cloud) == 0:
        raise InvalidInputError("cannot sample from an empty cloud")
    rng = np.random.default_rng(seed)
    if len(cloud) >= n:
        idx = rng.choice(len(cloud), size=n, replace=False)
    else:
        pad = rng.choice(len(cloud), size=n - len(cloud), replace=True)
        idx = np.concatenate([np.arange(len(cloud)), pad])
    idx = np.sort(idx)
    pixels = cloud.pixels[idx] if cloud.pixels is not None else None
    return PointCloud(points=cloud.points[idx], pixels=pixels)


def crop_cloud(cloud: PointCloud, min_depth: Optional[float] = None,
               max_depth: Optional[float] = None, min_y: Optional[float] = None,
               max_y: Optional[float] = None) -> PointCloud:
    """Optional range/height crop; every bound defaults to off."""
    keep = np.ones(len(cloud), dtype=bool)
    z = cloud.points[:, 2]
    y = cloud.points[:, 1]
    if min_depth is not None:
        keep &= z >= min_depth
    if max_depth is not None:
        keep &= z <= max_depth
    if min_y is not None:
        keep &= y >= min_y
    if max_y is not None:
        keep &= y <= max_y
    pixels = cloud.pixels[keep] if cloud.pixels is not None else None
    return PointCloud(points=cloud.points[keep], pixels=pixels)

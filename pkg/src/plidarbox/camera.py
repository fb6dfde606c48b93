"""Pinhole projection/unprojection and camera/world rigid transforms.

Camera coordinates follow the KITTI rectified-camera convention: x right,
y down, z forward (depth). All operations are pure and accept either a
single coordinate or arrays with any number of leading dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidInputError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the baseline offsets of a 3x4 projection matrix.

    ``bx``/``by`` carry the fourth column of a KITTI-style projection matrix,
    expressed in meters (``bx = P[0, 3] / fx``), so that projection and
    unprojection round-trip exactly for a rectified side camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    bx: float = 0.0
    by: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.bx, self.by)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraPose:
    """Rigid transform mapping world points into the camera frame.

    ``p_cam = rotation @ p_world + translation``.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidInputError("rotation must be a 3x3 matrix")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0.0):
            raise InvalidInputError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("rotation must be proper (det = +1)")
        if not np.all(np.isfinite(t)):
            raise InvalidInputError("translation must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


def unproject(pixels, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates with known depth to camera-frame 3D points.

    Args:
        pixels: (u, v) pair or array of shape (..., 2), in pixels.
        depth: positive depth along the optical axis, broadcastable against
            the leading shape of ``pixels``.
        intr: camera intrinsics.

    Returns:
        Array of shape (..., 3) with
        ``x = (u - cx) * z / fx - bx``, ``y = (v - cy) * z / fy - by``, ``z = depth``.
    """
    px = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if px.shape[-1:] != (2,):
        raise InvalidInputError("pixels must have a trailing dimension of 2")
    if not np.all(np.isfinite(px)):
        raise InvalidInputError("pixel coordinates must be finite")
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise InvalidInputError("depth must be positive and finite")
    x = (px[..., 0] - intr.cx) * z / intr.fx - intr.bx
    y = (px[..., 1] - intr.cy) * z / intr.fy - intr.by
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def project(points, intr: CameraIntrinsics):
    """Project camera-frame 3D points onto the image plane.

    Args:
        points: (x, y, z) triple or array of shape (..., 3), in meters.
        intr: camera intrinsics.

    Returns:
        ``(pixels, depth)`` where pixels has shape (..., 2) and depth equals
        the z coordinate. Exact inverse of :func:`unproject`.

    Raises:
        BehindCameraError: if any point has z <= 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1:] != (3,):
        raise InvalidInputError("points must have a trailing dimension of 3")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points must be finite")
    z = pts[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project points with non-positive depth")
    u = intr.fx * (pts[..., 0] + intr.bx) / z + intr.cx
    v = intr.fy * (pts[..., 1] + intr.by) / z + intr.cy
    return np.stack([u, v], axis=-1), np.array(z)


def camera_to_world(points, pose: CameraPose) -> np.ndarray:
    """Map camera-frame points to world coordinates: ``R^T (p - t)``."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts - pose.translation) @ pose.rotation


def world_to_camera(points, pose: CameraPose) -> np.ndarray:
    """Map world points into the camera frame: ``R p + t``."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation

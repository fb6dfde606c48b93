"""Oriented 3D boxes: corner generation, image projection, MBR and IoU.

A box is the compact 7-parameter form: geometric center (x, y, z), sizes
(h, w, l) and heading ``theta`` about the vertical (camera y) axis. BEV
footprints live in the ground plane (x, z).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, project
from .errors import InvalidInputError, NotFoundError

# On-edge classification tolerance for polygon clipping; collinear points
# resolve toward inclusion.
_CLIP_EPS = 1e-12

# Corner ordering: rows 0-3 are the top face (y = -h/2, camera y points
# down) counter-clockwise in the (x, z) plane starting from (+l/2, +w/2)
# in local coordinates; rows 4-7 are the matching bottom face. Columns are
# the signs of the local (l, h, w) half-extents.
CORNER_SIGNS = np.array(
    [
        [+1, -1, +1],
        [-1, -1, +1],
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, +1, -1],
        [+1, +1, -1],
    ],
    dtype=np.float64,
)


def normalize_angle(theta: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    r = math.fmod(theta + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


def rot_y(theta: float) -> np.ndarray:
    """Rotation matrix about the camera y axis (yaw/heading)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, sizes and heading about the vertical axis."""

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.h, self.w, self.l, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("box parameters must be finite")
        if self.h < 0 or self.w < 0 or self.l < 0:
            raise InvalidInputError("box sizes must be non-negative")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def to_array(self) -> np.ndarray:
        """Parameters as (x, y, z, h, w, l, theta)."""
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.theta])

    @classmethod
    def from_array(cls, params) -> "Box3D":
        x, y, z, h, w, l, theta = np.asarray(params, dtype=np.float64)
        return cls(x=x, y=y, z=z, h=h, w=w, l=l, theta=theta)

    def volume(self) -> float:
        return self.h * self.w * self.l


@dataclass(frozen=True)
class Rect:
    """Axis-aligned 2D box: top-left corner plus extent, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise InvalidInputError("rect fields must be finite")
        if self.w < 0 or self.h < 0:
            raise InvalidInputError("rect extent must be non-negative")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_tuple(self):
        return (self.x, self.y, self.w, self.h)


def corners(box: Box3D) -> np.ndarray:
    """The 8 corners of a box, shape (8, 3), in the documented order."""
    local = CORNER_SIGNS * np.array([box.l / 2.0, box.h / 2.0, box.w / 2.0])
    return local @ rot_y(box.theta).T + box.center


def corners_batch(params: np.ndarray) -> np.ndarray:
    """Corners for an (n, 7) array of box parameters, shape (n, 8, 3)."""
    p = np.asarray(params, dtype=np.float64)
    half = np.stack([p[:, 5], p[:, 3], p[:, 4]], axis=1) / 2.0  # (n, 3) = (l, h, w)/2
    local = CORNER_SIGNS[None, :, :] * half[:, None, :]
    c, s = np.cos(p[:, 6]), np.sin(p[:, 6])
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    rx = c[:, None] * x + s[:, None] * z
    rz = -s[:, None] * x + c[:, None] * z
    out = np.stack([rx, y, rz], axis=-1)
    return out + p[:, None, 0:3]


def project_box(box: Box3D, intr: CameraIntrinsics) -> np.ndarray:
    """Project all 8 corners onto the image, shape (8, 2), order preserved.

    Raises:
        BehindCameraError: if any corner lies at or behind the camera plane.
    """
    pixels, _ = project(corners(box), intr)
    return pixels


def mbr(points) -> Rect:
    """Smallest axis-aligned rectangle enclosing a 2D point set."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.size == 0:
        raise InvalidInputError("cannot compute the MBR of an empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return Rect(x=lo[0], y=lo[1], w=hi[0] - lo[0], h=hi[1] - lo[1])


def mask_mbr(mask, instance_id: int) -> Rect:
    """Tight pixel bounds of one instance id in a label map.

    Width/height are measured in whole pixels (max - min + 1). Accepts an
    ``InstanceMap`` or a bare 2D id array.

    Raises:
        NotFoundError: if the id does not occur in the map.
    """
    ids = np.asarray(getattr(mask, "ids", mask))
    rows, cols = np.nonzero(ids == instance_id)
    if rows.size == 0:
        raise NotFoundError(f"instance id {instance_id} not present in mask")
    return Rect(
        x=float(cols.min()),
        y=float(rows.min()),
        w=float(cols.max() - cols.min() + 1),
        h=float(rows.max() - rows.min() + 1),
    )


def iou2d(a: Rect, b: Rect) -> float:
    """Intersection over union of two axis-aligned rectangles."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def bev_polygon(box: Box3D) -> np.ndarray:
    """Footprint of a box in the ground plane: (4, 2) array of (x, z), CCW."""
    return corners(box)[0:4][:, [0, 2]]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon; positive when CCW."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon."""
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= -_CLIP_EPS
        for cur in inputs:
            # cross(edge, point - a) >= -eps keeps the left half-plane of a
            # CCW clip polygon; on-edge points resolve toward inclusion
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= -_CLIP_EPS
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if abs(denom) > _CLIP_EPS:
                    t = (ex * (ay - prev[1]) - ey * (ax - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _clip_sign_area(poly: np.ndarray) -> float:
    return abs(polygon_area(poly))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Area of the overlap between two box footprints."""
    pa, pb = bev_polygon(a), bev_polygon(b)
    return _clip_sign_area(clip_convex(pa, pb))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two boxes (rotated-rectangle overlap)."""
    inter = bev_intersection_area(a, b)
    area_a = a.w * a.l
    area_b = b.w * b.l
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint overlap times vertical (y) extent overlap."""
    inter_area = bev_intersection_area(a, b)
    y_overlap = max(
        0.0,
        min(a.y + a.h / 2.0, b.y + b.h / 2.0) - max(a.y - a.h / 2.0, b.y - b.h / 2.0),
    )
    inter = inter_area * y_overlap
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)

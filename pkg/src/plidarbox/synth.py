"""Synthetic scenes: deterministic depth/mask rendering and depth corruption.

Scenes are boxes resting on a ground plane in camera coordinates. Rendering
casts one ray per pixel through the integer pixel coordinate (matching the
unprojection convention, so lifting a clean rendered depth map reproduces
the surfaces exactly). The noise model reproduces the two dominant failure
modes of depth-estimated point clouds: a per-object depth scaling that
slides points along their viewing rays, and a "long tail" of extra depth at
silhouette boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .boxes import Box3D, bev_polygon, iou_bev, rot_y
from .camera import CameraIntrinsics
from .errors import InvalidInputError, PlacementError
from .pseudolidar import DepthMap, InstanceMap

# KITTI-like camera used as the default scene viewpoint.
DEFAULT_CAMERA = CameraIntrinsics(fx=721.5, fy=721.5, cx=621.0, cy=187.5)
DEFAULT_IMAGE_SIZE = (1242, 375)
DEFAULT_GROUND_Y = 1.65


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    class_name: str = "Car"


@dataclass(frozen=True)
class Scene:
    """Boxes on a ground plane, viewed by a pinhole camera at the origin."""

    objects: List[SceneObject]
    ground_y: float = DEFAULT_GROUND_Y
    camera: CameraIntrinsics = DEFAULT_CAMERA
    width: int = DEFAULT_IMAGE_SIZE[0]
    height: int = DEFAULT_IMAGE_SIZE[1]

    def __post_init__(self):
        for obj in self.objects:
            if obj.box.z <= 0:
                raise InvalidInputError("scene boxes must be in front of the camera")
            if obj.box.y + obj.box.h / 2.0 > self.ground_y + 1e-6:
                raise InvalidInputError("scene boxes must not sink below the ground")

    @property
    def boxes(self) -> List[Box3D]:
        return [obj.box for obj in self.objects]


@dataclass(frozen=True)
class NoiseModel:
    """Synthetic pseudo-LiDAR corruption parameters.

    ``misalignment_bias`` and ``misalignment_jitter`` scale each object's
    depth by ``1 + bias + N(0, jitter)`` (one draw per object), which moves
    its points along their viewing rays. ``tail_width``/``tail_stretch``
    stretch the depth of silhouette-boundary pixels backwards by a uniform
    amount in ``[0, tail_stretch * depth]``.
    """

    misalignment_bias: float = 0.03
    misalignment_jitter: float = 0.02
    tail_width: int = 2
    tail_stretch: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if (
            self.misalignment_bias < 0
            or self.misalignment_jitter < 0
            or self.tail_stretch < 0
        ):
            raise InvalidInputError("noise coefficients must be non-negative")
        if int(self.tail_width) != self.tail_width or self.tail_width < 0:
            raise InvalidInputError("tail_width must be a non-negative integer")

    @classmethod
    def disabled(cls, seed: int = 0) -> "NoiseModel":
        return cls(0.0, 0.0, 0, 0.0, seed)


@dataclass(frozen=True)
class SceneSpec:
    """Random-scene parameters for :func:`generate_scene`.

    The default depth range keeps objects where their top face spans at
    least about a pixel row, so surface point clouds carry the full
    footprint extent.
    """

    n_boxes: int
    depth_range: Tuple[float, float] = (9.0, 22.0)
    h_range: Tuple[float, float] = (1.15, 1.45)
    w_range: Tuple[float, float] = (1.5, 1.8)
    l_range: Tuple[float, float] = (3.6, 4.4)
    heading_range: Tuple[float, float] = (-math.pi, math.pi)
    seed: int = 0
    camera: CameraIntrinsics = DEFAULT_CAMERA
    width: int = DEFAULT_IMAGE_SIZE[0]
    height: int = DEFAULT_IMAGE_SIZE[1]
    ground_y: float = DEFAULT_GROUND_Y
    class_name: str = "Car"
    # margin (meters) inflating footprints for the BEV separation check
    clearance: float = 0.5
    # minimum azimuthal gap (radians) between objects' viewing cones, so
    # instances never occlude each other
    min_angular_gap: float = 0.02
    max_attempts_per_box: int = 200

    def __post_init__(self):
        for rng in (self.depth_range, self.h_range, self.w_range, self.l_range,
                    self.heading_range):
            if rng[1] < rng[0]:
                raise InvalidInputError("ranges must be non-empty (low <= high)")
        if self.n_boxes < 0:
            raise InvalidInputError("n_boxes must be non-negative")


def _ray_grid(scene: Scene):
    """Per-pixel ray directions parameterized by depth.

    The point at depth z seen by pixel (u, v) is ``origin + z * direction``
    with ``direction = ((u - cx)/fx, (v - cy)/fy, 1)`` and
    ``origin = (-bx, -by, 0)``, matching :func:`plidarbox.camera.unproject`.
    """
    intr = scene.camera
    u = np.arange(scene.width, dtype=np.float64)
    v = np.arange(scene.height, dtype=np.float64)
    du = (u - intr.cx) / intr.fx
    dv = (v - intr.cy) / intr.fy
    dx, dy = np.meshgrid(du, dv)
    origin = np.array([-intr.bx, -intr.by, 0.0])
    return origin, dx, dy


def _intersect_box(origin, dx, dy, box: Box3D) -> np.ndarray:
    """Entry depth of each pixel ray into a box (inf where the ray misses)."""
    rot = rot_y(box.theta)
    o_local = rot.T @ (origin - box.center)
    # local direction components for every pixel; dz is identically 1
    d = np.stack([dx, dy, np.ones_like(dx)], axis=0)
    d_local = np.einsum("ij,jhw->ihw", rot.T, d)
    half = np.array([box.l / 2.0, box.h / 2.0, box.w / 2.0])
    tmin = np.full(dx.shape, -np.inf)
    tmax = np.full(dx.shape, np.inf)
    for axis in range(3):
        da = d_local[axis]
        oa = o_local[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - oa) / da
            t2 = (half[axis] - oa) / da
        parallel = np.abs(da) < 1e-15
        lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf, np.maximum(t1, t2))
        outside = parallel & (np.abs(oa) > half[axis])
        lo = np.where(outside, np.inf, lo)
        hi = np.where(outside, -np.inf, hi)
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _pixel_window(scene: Scene, box: Box3D):
    """Image rows/cols that can see a box: bounds of the projected corners.

    The silhouette of a convex solid is the convex hull of its projected
    vertices, so this window is exact up to the one-pixel safety margin.
    """
    from .boxes import corners
    from .camera import project

    pts = corners(box)
    if np.any(pts[:, 2] <= 1e-9):
        return 0, scene.height, 0, scene.width
    pixels, _ = project(pts, scene.camera)
    c0 = max(0, int(math.floor(pixels[:, 0].min())) - 1)
    c1 = min(scene.width, int(math.ceil(pixels[:, 0].max())) + 2)
    r0 = max(0, int(math.floor(pixels[:, 1].min())) - 1)
    r1 = min(scene.height, int(math.ceil(pixels[:, 1].max())) + 2)
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def render_depth(scene: Scene) -> Tuple[DepthMap, InstanceMap]:
    """Ray-cast a scene into a depth map and instance-id map.

    Each pixel takes the nearest box intersection (slab method in box-local
    coordinates), falling back to the ground plane; pixels that hit nothing
    are invalid. Instance ids are the 1-based index of the nearest box.
    """
    origin, dx, dy = _ray_grid(scene)
    depth = np.full(dx.shape, np.inf)
    ids = np.zeros(dx.shape, dtype=np.int32)
    for idx, box in enumerate(scene.boxes, start=1):
        window = _pixel_window(scene, box)
        if window is None:
            continue
        r0, r1, c0, c1 = window
        t = _intersect_box(origin, dx[r0:r1, c0:c1], dy[r0:r1, c0:c1], box)
        sub_depth = depth[r0:r1, c0:c1]
        sub_ids = ids[r0:r1, c0:c1]
        closer = t < sub_depth
        sub_depth[closer] = t[closer]
        sub_ids[closer] = idx
    with np.errstate(divide="ignore"):
        t_ground = (scene.ground_y - origin[1]) / dy
    ground_hit = (dy > 1e-15) & (t_ground > 0) & (t_ground < depth)
    depth[ground_hit] = t_ground[ground_hit]
    ids[ground_hit] = 0
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return DepthMap(depth=depth, valid=valid), InstanceMap(ids=ids)


def _boundary_band(obj_mask: np.ndarray, width: int) -> np.ndarray:
    """Object pixels within Chebyshev distance ``width`` of a non-object pixel.

    The image border itself is not treated as a silhouette edge.
    """
    interior = obj_mask.copy()
    for _ in range(width):
        padded = np.pad(interior, 1, mode="edge")
        shrunk = interior.copy()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                shrunk &= padded[1 + dr:padded.shape[0] - 1 + dr,
                                 1 + dc:padded.shape[1] - 1 + dc]
        interior = shrunk
    return obj_mask & ~interior


def corrupt_depth(depth: DepthMap, mask: InstanceMap, noise: NoiseModel) -> DepthMap:
    """Apply per-object misalignment scaling and silhouette tail stretching.

    Deterministic: each object's random draws come from an RNG stream keyed
    by ``(noise.seed, instance id)`` and are consumed in a fixed order, so
    results do not depend on iteration or parallel schedule. Background
    pixels are never touched.
    """
    if mask.ids.shape != depth.depth.shape:
        raise InvalidInputError("mask and depth dimensions must match")
    out = depth.depth.copy()
    for instance_id in mask.instance_ids:
        rng = np.random.default_rng([noise.seed, int(instance_id)])
        jitter = rng.normal(0.0, noise.misalignment_jitter)
        scale = 1.0 + noise.misalignment_bias + jitter
        obj = (mask.ids == instance_id) & depth.valid
        out[obj] *= scale
        if noise.tail_width > 0 and noise.tail_stretch > 0:
            band = _boundary_band(obj, int(noise.tail_width))
            rows, cols = np.nonzero(band)
            extra = rng.uniform(0.0, 1.0, size=rows.size)
            out[rows, cols] += extra * noise.tail_stretch * out[rows, cols]
    return DepthMap(depth=out, valid=depth.valid.copy())


def _angular_interval(box: Box3D):
    """Azimuth range subtended by a box footprint as seen from the camera."""
    angles = [math.atan2(x, z) for x, z in bev_polygon(box)]
    return min(angles), max(angles)


def _fully_visible(box: Box3D, spec: SceneSpec, margin: float = 2.0) -> bool:
    """All corners project inside the image (the silhouette of a convex box
    is the hull of its projected corners)."""
    from .boxes import corners
    from .camera import project

    pts = corners(box)
    if np.any(pts[:, 2] <= 0.1):
        return False
    pixels, _ = project(pts, spec.camera)
    return bool(
        np.all(pixels[:, 0] >= margin)
        and np.all(pixels[:, 0] <= spec.width - 1 - margin)
        and np.all(pixels[:, 1] >= margin)
        and np.all(pixels[:, 1] <= spec.height - 1 - margin)
    )


def generate_scene(spec: SceneSpec) -> Scene:
    """Draw a random scene: ground-resting boxes, fully visible, unoccluded.

    Boxes are rejection-sampled until their inflated footprints are disjoint
    in BEV and their viewing cones are separated by ``min_angular_gap``, so
    every instance is fully visible in the image and occludes nothing.

    Raises:
        PlacementError: the retry budget ran out before ``n_boxes`` fit.
    """
    rng = np.random.default_rng(spec.seed)
    intr = spec.camera
    scene_attempts = 50
    for _ in range(scene_attempts):
        placed: List[Box3D] = []
        intervals = []
        for _ in range(spec.n_boxes):
            for _ in range(spec.max_attempts_per_box):
                z = rng.uniform(*spec.depth_range)
                h = rng.uniform(*spec.h_range)
                w = rng.uniform(*spec.w_range)
                l = rng.uniform(*spec.l_range)
                theta = rng.uniform(*spec.heading_range)
                radius = math.hypot(l, w) / 2.0
                x_lo = (0 - intr.cx) / intr.fx * (z - radius) + radius - intr.bx
                x_hi = (spec.width - 1 - intr.cx) / intr.fx * (z - radius) - radius - intr.bx
                if x_hi <= x_lo:
                    continue
                x = rng.uniform(x_lo, x_hi)
                box = Box3D(
                    x=x, y=spec.ground_y - h / 2.0, z=z, h=h, w=w, l=l, theta=theta
                )
                if not _fully_visible(box, spec):
                    continue
                inflated = Box3D(
                    x=x, y=box.y, z=z,
                    h=h, w=w + 2 * spec.clearance, l=l + 2 * spec.clearance,
                    theta=theta,
                )
                lo_a, hi_a = _angular_interval(box)
                separated = all(
                    hi_a + spec.min_angular_gap < other_lo
                    or lo_a - spec.min_angular_gap > other_hi
                    for other_lo, other_hi in intervals
                )
                if separated and all(iou_bev(inflated, other) == 0.0 for other in placed):
                    placed.append(box)
                    intervals.append((lo_a, hi_a))
                    break
            else:
                break  # this arrangement got stuck; restart the whole scene
        if len(placed) == spec.n_boxes:
            objects = [SceneObject(box=b, class_name=spec.class_name) for b in placed]
            return Scene(
                objects=objects,
                ground_y=spec.ground_y,
                camera=spec.camera,
                width=spec.width,
                height=spec.height,
            )
    raise PlacementError(
        f"could not place {spec.n_boxes} boxes within {scene_attempts} scene attempts"
    )

"""Parsers and writers for KITTI calibration, label, depth, mask and cloud files.

All functions are pure over byte buffers / strings; the CLI layer owns the
file system. Parsing is strict by default: a malformed line fails the whole
parse with a :class:`FormatError` naming the line. ``permissive=True``
downgrades bad label lines to logged warnings.

On-disk conventions
    calib:  ``KEY: v0 v1 ... vN`` lines; P2 (3x4), R0_rect (3x3),
            Tr_velo_to_cam (3x4) are consumed, unknown keys ignored.
    label:  15 whitespace-separated fields per object (16 with a trailing
            detection score), KITTI devkit field order.
    depth:  16-bit single-channel PNG, meters = stored / 256, 0 = invalid.
    mask:   8- or 16-bit single-channel PNG, 0 = background, k > 0 = id k.
    cloud:  ``bin`` = little-endian float32 (x, y, z, reflectance=1.0)
            quadruples; ``ply`` = ASCII PLY with x, y, z vertex properties.
"""
from __future__ import annotations

import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from PIL import Image

from .boxes import Box3D, Rect, normalize_angle
from .camera import CameraIntrinsics
from .errors import FormatError, InvalidInputError
from .pseudolidar import DepthMap, InstanceMap, PointCloud

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0

_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


@dataclass(frozen=True)
class CalibRecord:
    """The camera-2 projection matrix plus rectification and LiDAR transforms."""

    p2: np.ndarray
    r0_rect: np.ndarray
    tr_velo_to_cam: np.ndarray

    def __post_init__(self):
        p2 = np.asarray(self.p2, dtype=np.float64).reshape(3, 4)
        r0 = np.asarray(self.r0_rect, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        if p2[0, 0] <= 0 or p2[1, 1] <= 0:
            raise FormatError("P2 focal lengths must be positive")
        if not np.allclose(r0.T @ r0, np.eye(3), atol=1e-6, rtol=0.0):
            raise FormatError("R0_rect must be orthonormal")
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "r0_rect", r0)
        object.__setattr__(self, "tr_velo_to_cam", tr)


def _decode(data) -> str:
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def parse_calib(data) -> CalibRecord:
    """Parse a KITTI calibration file (bytes or str)."""
    values = {}
    for lineno, raw in enumerate(_decode(data).splitlines(), start=1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_SHAPES:
            continue
        try:
            vals = [float(tok) for tok in rest.split()]
        except ValueError:
            raise FormatError(f"non-numeric value for key {key!r}", line=lineno)
        rows, cols = _CALIB_SHAPES[key]
        if len(vals) != rows * cols:
            raise FormatError(
                f"key {key!r} expects {rows * cols} values, got {len(vals)}",
                line=lineno,
            )
        values[key] = np.array(vals).reshape(rows, cols)
    if "P2" not in values:
        raise FormatError("calibration file is missing the P2 key")
    r0 = values.get("R0_rect", np.eye(3))
    tr = values.get("Tr_velo_to_cam", np.hstack([np.eye(3), np.zeros((3, 1))]))
    return CalibRecord(p2=values["P2"], r0_rect=r0, tr_velo_to_cam=tr)


def format_calib(calib: CalibRecord) -> str:
    """Serialize a CalibRecord; inverse of :func:`parse_calib`."""
    lines = []
    for key, mat in (
        ("P2", calib.p2),
        ("R0_rect", calib.r0_rect),
        ("Tr_velo_to_cam", calib.tr_velo_to_cam),
    ):
        lines.append(key + ": " + " ".join(repr(float(v)) for v in mat.ravel()))
    return "\n".join(lines) + "\n"


def intrinsics_from_calib(calib: CalibRecord) -> CameraIntrinsics:
    """Decompose P2 into pinhole intrinsics plus baseline offsets."""
    fx, fy = calib.p2[0, 0], calib.p2[1, 1]
    return CameraIntrinsics(
        fx=fx,
        fy=fy,
        cx=calib.p2[0, 2],
        cy=calib.p2[1, 2],
        bx=calib.p2[0, 3] / fx,
        by=calib.p2[1, 3] / fy,
    )


@dataclass(frozen=True)
class LabelRecord:
    """One KITTI label line: class, 2D box, 3D dimensions/location and heading.

    ``location`` is the bottom-face center in camera coordinates (y down);
    ``dimensions`` are (h, w, l). ``score`` is present only for detections.
    DontCare rows are kept as-is and skip the numeric-range checks.
    """

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: Rect
    dimensions: tuple
    location: tuple
    rotation_y: float
    score: Optional[float] = None

    def __post_init__(self):
        if self.class_name == "DontCare":
            return
        h, w, l = self.dimensions
        if min(h, w, l) < 0:
            raise InvalidInputError("dimensions must be non-negative")
        if not 0.0 <= self.truncation <= 1.0:
            raise InvalidInputError("truncation must lie in [0, 1]")
        if self.occlusion not in (0, 1, 2, 3):
            raise InvalidInputError("occlusion must be one of {0, 1, 2, 3}")
        if not -math.pi - 1e-6 <= self.rotation_y <= math.pi + 1e-6:
            raise InvalidInputError("rotation_y must lie in [-pi, pi]")


def _parse_label_line(line: str, lineno: int) -> LabelRecord:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise FormatError(
            f"expected 15 or 16 fields, got {len(fields)}", line=lineno
        )
    try:
        nums = [float(tok) for tok in fields[1:]]
    except ValueError:
        raise FormatError("non-numeric field in label line", line=lineno)
    left, top, right, bottom = nums[3:7]
    try:
        return LabelRecord(
            class_name=fields[0],
            truncation=nums[0],
            occlusion=int(nums[1]),
            alpha=nums[2],
            bbox2d=Rect(x=left, y=top, w=right - left, h=bottom - top),
            dimensions=(nums[7], nums[8], nums[9]),
            location=(nums[10], nums[11], nums[12]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        )
    except InvalidInputError as exc:
        raise FormatError(str(exc), line=lineno)


def parse_labels(data, permissive: bool = False) -> List[LabelRecord]:
    """Parse a KITTI label file into records, preserving line order.

    In permissive mode malformed lines are skipped with a warning instead of
    failing the parse.
    """
    records = []
    for lineno, raw in enumerate(_decode(data).splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            records.append(_parse_label_line(line, lineno))
        except FormatError as exc:
            if not permissive:
                raise
            log.warning("skipping malformed label line: %s", exc)
    return records


def format_labels(records) -> str:
    """Serialize label records, one line each, in KITTI field order."""
    lines = []
    for r in records:
        b = r.bbox2d
        parts = [
            r.class_name,
            f"{r.truncation:.2f}",
            str(int(r.occlusion)),
            f"{r.alpha:.2f}",
            f"{b.x:.2f}",
            f"{b.y:.2f}",
            f"{b.x + b.w:.2f}",
            f"{b.y + b.h:.2f}",
            f"{r.dimensions[0]:.2f}",
            f"{r.dimensions[1]:.2f}",
            f"{r.dimensions[2]:.2f}",
            f"{r.location[0]:.2f}",
            f"{r.location[1]:.2f}",
            f"{r.location[2]:.2f}",
            f"{r.rotation_y:.2f}",
        ]
        if r.score is not None:
            parts.append(f"{r.score:.4f}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def label_to_box3d(rec: LabelRecord) -> Box3D:
    """Convert a label's bottom-face-center location to a centered box."""
    h, w, l = rec.dimensions
    x, y, z = rec.location
    return Box3D(x=x, y=y - h / 2.0, z=z, h=h, w=w, l=l, theta=rec.rotation_y)


def label_from_box3d(box: Box3D, class_name: str, bbox2d: Rect, *,
                     truncation: float = 0.0, occlusion: int = 0,
                     alpha: Optional[float] = None,
                     score: Optional[float] = None) -> LabelRecord:
    """Build a label record from a centered box; inverse of :func:`label_to_box3d`."""
    if alpha is None:
        alpha = normalize_angle(box.theta - math.atan2(box.x, box.z))
    return LabelRecord(
        class_name=class_name,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox2d=bbox2d,
        dimensions=(box.h, box.w, box.l),
        location=(box.x, box.y + box.h / 2.0, box.z),
        rotation_y=box.theta,
        score=score,
    )


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    chunk = tag + payload
    return struct.pack(">I", len(payload)) + chunk + struct.pack(">I", zlib.crc32(chunk))


def _encode_gray_png(arr: np.ndarray, bit_depth: int) -> bytes:
    """Minimal deterministic grayscale PNG encoder (filter 0, fixed zlib level)."""
    h, w = arr.shape
    if bit_depth == 16:
        raw = arr.astype(">u2").view(np.uint8).reshape(h, w * 2)
    else:
        raw = arr.astype(np.uint8).reshape(h, w)
    scanlines = np.zeros((h, raw.shape[1] + 1), dtype=np.uint8)
    scanlines[:, 1:] = raw
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, 0, 0, 0, 0)
    return b"".join(
        [
            b"\x89PNG\r\n\x1a\n",
            _png_chunk(b"IHDR", ihdr),
            _png_chunk(b"IDAT", zlib.compress(scanlines.tobytes(), 9)),
            _png_chunk(b"IEND", b""),
        ]
    )


def _open_single_channel(data: bytes, what: str) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise FormatError(f"cannot decode {what} PNG: {exc}")
    if img.mode not in ("L", "I", "I;16", "I;16B"):
        raise FormatError(
            f"{what} PNG must be single-channel, got mode {img.mode!r}"
        )
    return img


def read_depth_png(data: bytes) -> DepthMap:
    """Decode a 16-bit depth PNG; stored value 0 marks an invalid pixel."""
    img = _open_single_channel(data, "depth")
    if img.mode == "L":
        raise FormatError("depth PNG must be 16-bit, got 8-bit")
    stored = np.asarray(img, dtype=np.int64)
    return DepthMap(depth=stored / DEPTH_SCALE, valid=stored > 0)


def write_depth_png(depth: DepthMap) -> bytes:
    """Encode a depth map as 16-bit PNG (meters * 256, rounded to nearest)."""
    stored = np.rint(depth.depth * DEPTH_SCALE)
    stored = np.clip(stored, 0, 65535).astype(np.uint16)
    stored[~depth.valid] = 0
    return _encode_gray_png(stored, 16)


def read_instance_mask(data: bytes) -> InstanceMap:
    """Decode an 8- or 16-bit single-channel instance-id PNG."""
    img = _open_single_channel(data, "instance mask")
    return InstanceMap(ids=np.asarray(img, dtype=np.int32))


def write_instance_mask(mask: InstanceMap) -> bytes:
    """Encode an instance map; 8-bit when ids fit, 16-bit otherwise."""
    ids = mask.ids
    if ids.min() < 0 or ids.max() > 65535:
        raise InvalidInputError("instance ids must lie in [0, 65535]")
    bit_depth = 8 if ids.max() <= 255 else 16
    return _encode_gray_png(ids, bit_depth)


def write_pointcloud(cloud: PointCloud, fmt: str = "bin") -> bytes:
    """Serialize a cloud as KITTI velodyne ``bin`` or ASCII ``ply``."""
    if fmt == "bin":
        out = np.ones((len(cloud), 4), dtype="<f4")
        out[:, :3] = cloud.points
        return out.tobytes()
    if fmt == "ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(cloud)}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
        body = [
            f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            for p in np.asarray(cloud.points, dtype=np.float64)
        ]
        return ("\n".join(header + body) + "\n").encode("ascii")
    raise InvalidInputError(f"unknown point cloud format {fmt!r}")


def read_pointcloud_bin(data: bytes) -> PointCloud:
    """Parse a velodyne-style bin buffer back into a cloud (reflectance dropped)."""
    if len(data) % 16 != 0:
        raise FormatError("bin point cloud length must be a multiple of 16 bytes")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(points=arr[:, :3].astype(np.float64))

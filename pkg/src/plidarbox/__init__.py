"""Pseudo-LiDAR frustum detection toolkit.

Turns monocular depth maps and 2D instance proposals into pseudo-LiDAR
point clouds, extracts per-object frustums, fits oriented 3D boxes, refines
them under a 2D-3D projection-consistency objective and evaluates results
with KITTI-style BEV/3D average precision.
"""

from .boxes import Box3D, Rect, bev_polygon, corners, iou2d, iou3d, iou_bev, mask_mbr, mbr, project_box
from .camera import CameraIntrinsics, CameraPose, camera_to_world, project, unproject, world_to_camera
from .consistency import (
    BoundCoeffs,
    DEConfig,
    DEFAULT_BOUND_COEFFS,
    ParamBounds,
    consistency_gradient,
    consistency_loss,
    depth_linear_bounds,
    differential_evolution,
    refine_box,
    smooth_l1,
)
from .box_fit import fit_box_baseline, trim_outliers
from .evaluation import (
    Detection,
    EvalConfig,
    GroundTruthObj,
    assign_difficulty,
    average_precision,
    evaluate,
    match_image,
    precision_recall,
)
from .pseudolidar import (
    DepthMap,
    InstanceMap,
    PointCloud,
    extract_frustum_box,
    extract_frustum_mask,
    generate_pseudolidar,
    sample_points,
)
from .synth import NoiseModel, Scene, SceneObject, SceneSpec, corrupt_depth, generate_scene, render_depth

__version__ = "0.1.0"

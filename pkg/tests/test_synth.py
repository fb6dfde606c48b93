import math

import numpy as np
import pytest

from plidarbox.boxes import Box3D, corners, iou_bev, mask_mbr, rot_y
from plidarbox.errors import InvalidInputError, PlacementError
from plidarbox.pseudolidar import extract_frustum_mask, generate_pseudolidar
from plidarbox.synth import (
    NoiseModel,
    Scene,
    SceneObject,
    SceneSpec,
    corrupt_depth,
    generate_scene,
    render_depth,
)

from conftest import make_car_box, single_box_scene


def surface_distance(points, box):
    """Distance from each point to the box surface (0 inside faces)."""
    local = (points - box.center) @ rot_y(box.theta)
    half = np.array([box.l / 2, box.h / 2, box.w / 2])
    d = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.abs(np.max(d, axis=1))
    return np.where(np.all(d <= 0, axis=1), inside, outside)


class TestRenderDepth:
    def test_axis_aligned_near_face_depth(self):
        scene = single_box_scene(x=0.0, z=21.0, theta=0.0, w=2.0)
        depth, mask = render_depth(scene)
        obj = mask.ids == 1
        assert obj.sum() > 500
        # near face of a fronto-parallel box sits at z - w/2 = 20
        assert depth.depth[obj].min() == pytest.approx(20.0, abs=1e-9)

    def test_missed_rays_invalid(self):
        scene = Scene(objects=[])
        depth, mask = render_depth(scene)
        # above the horizon nothing is hit
        assert not depth.valid[0, :].any()
        # below the horizon the ground plane is hit
        assert depth.valid[-1, :].all()
        assert (mask.ids == 0).all()

    def test_ground_depth_matches_plane_equation(self):
        scene = Scene(objects=[])
        depth, _ = render_depth(scene)
        intr = scene.camera
        v = scene.height - 1
        dy = (v - intr.cy) / intr.fy
        expected = scene.ground_y / dy
        assert depth.depth[v, 300] == pytest.approx(expected, abs=1e-9)

    def test_oblique_faces_match_ray_plane_oracle(self):
        # independent oracle: intersect each pixel ray with all six face
        # planes analytically and keep the nearest hit inside its face
        scene = single_box_scene(x=0.5, z=12.0, theta=0.7)
        depth, mask = render_depth(scene)
        box = scene.boxes[0]
        intr = scene.camera
        rot = rot_y(box.theta)
        half = np.array([box.l / 2, box.h / 2, box.w / 2])
        rows, cols = np.nonzero(mask.ids == 1)
        checked = 0
        for r, c in zip(rows[::250], cols[::250]):
            d = np.array([(c - intr.cx) / intr.fx, (r - intr.cy) / intr.fy, 1.0])
            best = np.inf
            for axis in range(3):
                for side in (-1.0, 1.0):
                    normal = rot[:, axis] * side
                    face_point = box.center + normal * half[axis]
                    denom = float(normal @ d)
                    if abs(denom) < 1e-15:
                        continue
                    t = float(normal @ face_point) / denom
                    if t <= 0:
                        continue
                    local = rot.T @ (t * d - box.center)
                    others = [i for i in range(3) if i != axis]
                    if all(abs(local[i]) <= half[i] + 1e-9 for i in others):
                        best = min(best, t)
            assert np.isfinite(best)
            assert depth.depth[r, c] == pytest.approx(best, abs=1e-9)
            checked += 1
        assert checked > 10

    def test_nearest_box_wins(self):
        near = make_car_box(x=0.0, z=10.0, theta=0.0)
        far = make_car_box(x=0.0, z=25.0, theta=0.0)
        scene = Scene(objects=[SceneObject(near), SceneObject(far)])
        depth, mask = render_depth(scene)
        assert (mask.ids == 1).sum() > 0
        # the far box is fully occluded in the overlap region
        rows, cols = np.nonzero(mask.ids == 1)
        assert depth.depth[rows, cols].max() < 15.0

    def test_valid_wherever_object(self):
        scene = single_box_scene(theta=1.1)
        depth, mask = render_depth(scene)
        assert depth.valid[mask.ids > 0].all()

    def test_reconstruction_fidelity(self):
        scene = single_box_scene(theta=0.6)
        depth, mask = render_depth(scene)
        cloud = extract_frustum_mask(depth, mask, 1, scene.camera)
        dist = surface_distance(cloud.points, scene.boxes[0])
        assert dist.max() <= 1e-6


class TestCorruptDepth:
    def test_zero_noise_is_identity(self):
        scene = single_box_scene()
        depth, mask = render_depth(scene)
        out = corrupt_depth(depth, mask, NoiseModel.disabled())
        np.testing.assert_array_equal(out.depth, depth.depth)
        np.testing.assert_array_equal(out.valid, depth.valid)

    def test_pure_bias_scales_exactly(self):
        scene = single_box_scene()
        depth, mask = render_depth(scene)
        noise = NoiseModel(misalignment_bias=0.05, misalignment_jitter=0.0,
                           tail_width=0, tail_stretch=0.0, seed=1)
        out = corrupt_depth(depth, mask, noise)
        obj = mask.ids == 1
        np.testing.assert_array_equal(out.depth[obj], depth.depth[obj] * 1.05)
        np.testing.assert_array_equal(out.depth[~obj], depth.depth[~obj])

    def test_bias_moves_points_along_rays(self):
        scene = single_box_scene(theta=0.4)
        depth, mask = render_depth(scene)
        noise = NoiseModel(misalignment_bias=0.07, misalignment_jitter=0.0,
                           tail_width=0, tail_stretch=0.0, seed=1)
        out = corrupt_depth(depth, mask, noise)
        clean = extract_frustum_mask(depth, mask, 1, scene.camera)
        moved = extract_frustum_mask(out, mask, 1, scene.camera)
        # collinearity: corrupted point is exactly scale * clean point when
        # the projection has no baseline offset
        np.testing.assert_allclose(moved.points, clean.points * 1.07, atol=1e-9)

    def test_jitter_deterministic_per_seed(self):
        scene = single_box_scene()
        depth, mask = render_depth(scene)
        noise = NoiseModel(seed=42)
        a = corrupt_depth(depth, mask, noise)
        b = corrupt_depth(depth, mask, noise)
        np.testing.assert_array_equal(a.depth, b.depth)
        c = corrupt_depth(depth, mask, NoiseModel(seed=43))
        assert not np.array_equal(a.depth, c.depth)

    def test_tail_stretches_boundary_backwards(self):
        scene = single_box_scene(z=12.0)
        depth, mask = render_depth(scene)
        noise = NoiseModel(misalignment_bias=0.0, misalignment_jitter=0.0,
                           tail_width=2, tail_stretch=0.5, seed=3)
        out = corrupt_depth(depth, mask, noise)
        box = scene.boxes[0]
        cloud = extract_frustum_mask(out, mask, 1, scene.camera)
        far_face = corners(box)[:, 2].max()
        assert (cloud.points[:, 2] > far_face + 0.1).sum() > 50
        # interior pixels untouched
        changed = out.depth != depth.depth
        assert changed.sum() < (mask.ids == 1).sum()

    def test_dimension_mismatch_rejected(self):
        scene = single_box_scene()
        depth, _ = render_depth(scene)
        from plidarbox.pseudolidar import InstanceMap

        with pytest.raises(InvalidInputError):
            corrupt_depth(depth, InstanceMap(ids=np.zeros((2, 2), dtype=np.int32)),
                          NoiseModel.disabled())


class TestGenerateScene:
    def test_zero_boxes(self):
        scene = generate_scene(SceneSpec(n_boxes=0, seed=1))
        assert scene.objects == []

    def test_deterministic_per_seed(self):
        a = generate_scene(SceneSpec(n_boxes=4, seed=9))
        b = generate_scene(SceneSpec(n_boxes=4, seed=9))
        for oa, ob in zip(a.objects, b.objects):
            np.testing.assert_array_equal(oa.box.to_array(), ob.box.to_array())

    def test_bev_disjoint(self):
        scene = generate_scene(SceneSpec(n_boxes=5, depth_range=(10, 50), seed=3))
        boxes = scene.boxes
        assert len(boxes) == 5
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert iou_bev(a, b) == 0.0

    def test_boxes_rest_on_ground(self):
        scene = generate_scene(SceneSpec(n_boxes=4, seed=11))
        for box in scene.boxes:
            assert box.y + box.h / 2 == pytest.approx(scene.ground_y)

    def test_every_instance_visible_and_unoccluded(self):
        scene = generate_scene(SceneSpec(n_boxes=5, seed=21))
        depth, mask = render_depth(scene)
        rendered = set(mask.instance_ids.tolist())
        assert rendered == set(range(1, 6))
        # unoccluded: each mask's pixel count matches a solo render
        for idx, obj in enumerate(scene.objects, start=1):
            solo_scene = Scene(objects=[obj], ground_y=scene.ground_y,
                               camera=scene.camera, width=scene.width,
                               height=scene.height)
            _, solo_mask = render_depth(solo_scene)
            assert (mask.ids == idx).sum() == (solo_mask.ids == 1).sum()

    def test_placement_error_when_impossible(self):
        spec = SceneSpec(n_boxes=40, depth_range=(10.0, 11.0), seed=0,
                         max_attempts_per_box=20)
        with pytest.raises(PlacementError):
            generate_scene(spec)

    def test_labels_inside_image(self):
        scene = generate_scene(SceneSpec(n_boxes=4, seed=17))
        _, mask = render_depth(scene)
        for idx in range(1, 5):
            rect = mask_mbr(mask, idx)
            assert rect.x >= 0 and rect.y >= 0
            assert rect.x + rect.w <= scene.width
            assert rect.y + rect.h <= scene.height

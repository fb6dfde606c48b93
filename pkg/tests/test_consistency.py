import math

import numpy as np
import pytest

from plidarbox.boxes import Box3D, Rect, iou2d, mbr, project_box
from plidarbox.camera import CameraIntrinsics
from plidarbox.consistency import (
    BoundCoeffs,
    DEConfig,
    DEFAULT_BOUND_COEFFS,
    ParamBounds,
    consistency_gradient,
    consistency_loss,
    consistency_loss_batch,
    consistency_residuals,
    depth_linear_bounds,
    differential_evolution,
    refine_box,
    smooth_l1,
)
from plidarbox.errors import BehindCameraError, InvalidInputError

from conftest import make_car_box


def random_config(rng, intr):
    """A generic box/proposal pair away from MBR ties and smooth-L1 kinks."""
    while True:
        box = Box3D(
            x=rng.uniform(-4, 4),
            y=rng.uniform(-1, 1),
            z=rng.uniform(8, 35),
            h=rng.uniform(0.8, 2.0),
            w=rng.uniform(0.8, 2.2),
            l=rng.uniform(1.5, 5.0),
            theta=rng.uniform(-math.pi, math.pi),
        )
        px = project_box(box, intr)
        u, v = px[:, 0], px[:, 1]
        # corners i and i+4 share (x, z) and therefore u; only ties between
        # distinct vertical edges make the MBR achiever ambiguous
        su = np.sort(u[:4])
        sv = np.sort(v)
        gaps = [su[1] - su[0], su[-1] - su[-2], sv[1] - sv[0], sv[-1] - sv[-2]]
        if min(gaps) < 1e-2:  # too close to an MBR achiever tie
            continue
        proposal = Rect(
            x=rng.uniform(0, 1200), y=rng.uniform(0, 350),
            w=rng.uniform(10, 300), h=rng.uniform(10, 200),
        )
        res = consistency_residuals(box, proposal, intr)
        if np.min(np.abs(np.abs(res) - 1.0)) < 1e-2:  # near the smooth-L1 kink
            continue
        return box, proposal


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0) == (0.0, 0.0)

    def test_quadratic_region(self):
        value, deriv = smooth_l1(0.5)
        assert value == pytest.approx(0.125)
        assert deriv == pytest.approx(0.5)

    def test_linear_region(self):
        value, deriv = smooth_l1(2.0)
        assert value == pytest.approx(1.5)
        assert deriv == 1.0

    def test_negative_linear_region(self):
        value, deriv = smooth_l1(-3.0)
        assert value == pytest.approx(2.5)
        assert deriv == -1.0

    def test_custom_beta(self):
        value, deriv = smooth_l1(0.5, beta=2.0)
        assert value == pytest.approx(0.0625)
        assert deriv == pytest.approx(0.25)

    def test_array_input(self):
        value, deriv = smooth_l1(np.array([0.0, 0.5, 2.0]))
        np.testing.assert_allclose(value, [0.0, 0.125, 1.5])
        np.testing.assert_allclose(deriv, [0.0, 0.5, 1.0])

    def test_invalid_beta(self):
        with pytest.raises(InvalidInputError):
            smooth_l1(1.0, beta=0.0)

    def test_continuous_at_kink(self):
        inside, _ = smooth_l1(1.0 - 1e-12)
        outside, _ = smooth_l1(1.0 + 1e-12)
        assert inside == pytest.approx(outside, abs=1e-9)


class TestConsistencyLoss:
    def test_exact_match_is_zero(self, kitti_intr):
        box = make_car_box()
        proposal = mbr(project_box(box, kitti_intr))
        assert consistency_loss(box, proposal, kitti_intr) == 0.0

    def test_single_shifted_component(self, kitti_intr):
        box = make_car_box()
        exact = mbr(project_box(box, kitti_intr))
        shifted = Rect(exact.x + 3.0, exact.y, exact.w, exact.h)
        # one residual of -3 px in the linear region: |x| - 0.5
        assert consistency_loss(box, shifted, kitti_intr) == pytest.approx(2.5)

    def test_behind_camera_propagates(self, simple_intr):
        box = Box3D(0, 0, 0.5, 1, 4, 1, theta=0)
        with pytest.raises(BehindCameraError):
            consistency_loss(box, Rect(0, 0, 10, 10), simple_intr)

    def test_batch_matches_scalar(self, kitti_intr):
        rng = np.random.default_rng(0)
        proposal = Rect(500, 150, 120, 60)
        boxes = [random_config(rng, kitti_intr)[0] for _ in range(20)]
        params = np.stack([b.to_array() for b in boxes])
        batch = consistency_loss_batch(params, proposal, kitti_intr)
        for i, box in enumerate(boxes):
            assert batch[i] == pytest.approx(
                consistency_loss(box, proposal, kitti_intr), rel=1e-12
            )

    def test_batch_marks_behind_camera_as_inf(self, simple_intr):
        params = Box3D(0, 0, 0.5, 1, 4, 1, theta=0).to_array()[None, :]
        assert np.isinf(consistency_loss_batch(params, Rect(0, 0, 1, 1), simple_intr))

    def test_nonnegative_and_zero_iff_match(self, kitti_intr):
        rng = np.random.default_rng(1)
        for _ in range(20):
            box, proposal = random_config(rng, kitti_intr)
            loss = consistency_loss(box, proposal, kitti_intr)
            assert loss >= 0.0
            exact = mbr(project_box(box, kitti_intr))
            assert consistency_loss(box, exact, kitti_intr) == 0.0
            if loss == 0.0:
                np.testing.assert_allclose(
                    consistency_residuals(box, proposal, kitti_intr), 0.0, atol=1e-12
                )

    def test_residual_scale_consistency(self, kitti_intr):
        # scaling the camera and the proposal by s scales residuals by s
        rng = np.random.default_rng(2)
        box, proposal = random_config(rng, kitti_intr)
        s = 2.5
        scaled_intr = CameraIntrinsics(
            fx=kitti_intr.fx * s, fy=kitti_intr.fy * s,
            cx=kitti_intr.cx * s, cy=kitti_intr.cy * s,
        )
        scaled_proposal = Rect(proposal.x * s, proposal.y * s, proposal.w * s, proposal.h * s)
        base = consistency_residuals(box, proposal, kitti_intr)
        scaled = consistency_residuals(box, scaled_proposal, scaled_intr)
        np.testing.assert_allclose(scaled, s * base, rtol=1e-12, atol=1e-9)


class TestConsistencyGradient:
    def test_zero_at_zero_loss(self, kitti_intr):
        box = make_car_box()
        proposal = mbr(project_box(box, kitti_intr))
        np.testing.assert_allclose(
            consistency_gradient(box, proposal, kitti_intr), np.zeros(7), atol=1e-12
        )

    def test_matches_central_finite_differences(self, kitti_intr):
        rng = np.random.default_rng(3)
        step = 1e-5
        for _ in range(50):
            box, proposal = random_config(rng, kitti_intr)
            analytic = consistency_gradient(box, proposal, kitti_intr)
            params = box.to_array()
            numeric = np.empty(7)
            for j in range(7):
                hi = params.copy()
                lo = params.copy()
                hi[j] += step
                lo[j] -= step
                f_hi = consistency_loss(Box3D.from_array(hi), proposal, kitti_intr)
                f_lo = consistency_loss(Box3D.from_array(lo), proposal, kitti_intr)
                numeric[j] = (f_hi - f_lo) / (2 * step)
            denom = np.maximum(1.0, np.abs(numeric))
            np.testing.assert_array_less(np.abs(analytic - numeric) / denom, 1e-4)

    def test_lateral_gradient_sign(self, kitti_intr):
        # proposal sits to the right of the projection: moving the box right
        # must reduce the loss, so dL/dx < 0
        box = make_car_box(x=0.0, theta=0.2)
        exact = mbr(project_box(box, kitti_intr))
        proposal = Rect(exact.x + 40.0, exact.y, exact.w, exact.h)
        grad = consistency_gradient(box, proposal, kitti_intr)
        assert grad[0] < 0


class TestDepthLinearBounds:
    def test_constant_term_only(self):
        coeffs = BoundCoeffs(a=[1, 0, 0, 0, 0, 0, 0], b=np.zeros(7))
        box = make_car_box(x=2.0, z=25.0)
        bounds = depth_linear_bounds(box, coeffs)
        assert bounds.lower[0] == pytest.approx(1.0)
        assert bounds.upper[0] == pytest.approx(3.0)

    def test_linear_growth(self):
        coeffs = BoundCoeffs(a=[0, 0, 0.5, 0, 0, 0, 0], b=[0, 0, 0.1, 0, 0, 0, 0])
        box = make_car_box(z=20.0)
        bounds = depth_linear_bounds(box, coeffs)
        assert (bounds.upper[2] - bounds.lower[2]) / 2 == pytest.approx(2.5)

    def test_monotone_in_depth(self):
        near = depth_linear_bounds(make_car_box(z=10.0))
        far = depth_linear_bounds(make_car_box(z=40.0))
        near_half = (near.upper - near.lower) / 2
        far_half = (far.upper - far.lower) / 2
        assert np.all(far_half >= near_half - 1e-12)

    def test_sizes_floored_at_zero(self):
        coeffs = BoundCoeffs(a=[0, 0, 0, 5, 5, 5, 0.2], b=np.zeros(7))
        bounds = depth_linear_bounds(make_car_box(), coeffs)
        assert np.all(bounds.lower[3:6] == 0.0)

    def test_init_always_inside(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            box = make_car_box(z=rng.uniform(5, 60), theta=rng.uniform(-3, 3))
            assert depth_linear_bounds(box).contains(box.to_array())


class TestDifferentialEvolution:
    def test_sphere_reaches_optimum(self):
        bounds = ParamBounds(lower=np.full(7, -5.0), upper=np.full(7, 5.0))
        best, value = differential_evolution(
            lambda p: float(np.sum(p ** 2)), bounds, DEConfig(seed=1), np.ones(7)
        )
        assert value <= 1e-6
        assert np.all(np.abs(best) < 1e-3)

    def test_embedded_rosenbrock(self):
        lower = np.array([-2.0, -2.0, 0, 0, 0, 0, 0])
        upper = np.array([2.0, 2.0, 0, 0, 0, 0, 0])
        bounds = ParamBounds(lower=lower, upper=upper)

        def rosenbrock(p):
            return float(100 * (p[1] - p[0] ** 2) ** 2 + (1 - p[0]) ** 2)

        best, value = differential_evolution(
            rosenbrock, bounds, DEConfig(seed=2, max_generations=300), np.zeros(7)
        )
        np.testing.assert_allclose(best[:2], [1.0, 1.0], atol=1e-3)
        np.testing.assert_array_equal(best[2:], np.zeros(5))

    def test_deterministic_per_seed(self):
        bounds = ParamBounds(lower=np.full(7, -3.0), upper=np.full(7, 3.0))

        def objective(p):
            return float(np.sum((p - 0.5) ** 2) + np.sin(p[0]))

        runs = [
            differential_evolution(objective, bounds, DEConfig(seed=11), np.zeros(7))
            for _ in range(2)
        ]
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_never_worse_than_init(self):
        bounds = ParamBounds(lower=np.full(7, -1.0), upper=np.full(7, 1.0))
        rng = np.random.default_rng(5)

        def nasty(p):
            return float(np.sum(np.abs(p)) + 5 * np.cos(10 * p[0]))

        for seed in range(5):
            init = rng.uniform(-1, 1, size=7)
            _, value = differential_evolution(nasty, bounds, DEConfig(seed=seed, max_generations=5), init)
            assert value <= nasty(init) + 1e-15

    def test_init_outside_bounds_rejected(self):
        bounds = ParamBounds(lower=np.zeros(7), upper=np.ones(7))
        with pytest.raises(InvalidInputError):
            differential_evolution(lambda p: 0.0, bounds, DEConfig(), np.full(7, 2.0))

    def test_vectorized_path_matches_scalar(self):
        bounds = ParamBounds(lower=np.full(7, -2.0), upper=np.full(7, 2.0))

        def scalar(p):
            return float(np.sum(p ** 4 - p))

        def batch(ps):
            return np.sum(ps ** 4 - ps, axis=1)

        cfg = DEConfig(seed=7, max_generations=40)
        best_s, val_s = differential_evolution(scalar, bounds, cfg, np.zeros(7))
        best_v, val_v = differential_evolution(batch, bounds, cfg, np.zeros(7), vectorized=True)
        np.testing.assert_array_equal(best_s, best_v)
        assert val_s == val_v


class TestRefineBox:
    def test_zero_loss_init_stays_zero(self, kitti_intr):
        box = make_car_box()
        proposal = mbr(project_box(box, kitti_intr))
        refined = refine_box(box, proposal, kitti_intr, DEConfig(seed=0, max_generations=20))
        assert consistency_loss(refined, proposal, kitti_intr) == 0.0

    def test_recovers_lateral_shift(self, kitti_intr):
        from plidarbox.boxes import mask_mbr
        from plidarbox.synth import Scene, SceneObject, render_depth

        truth = make_car_box(x=0.5, z=16.0, theta=0.4)
        scene = Scene(objects=[SceneObject(truth)])
        _, mask = render_depth(scene)
        proposal = mask_mbr(mask, 1)
        init = Box3D(
            truth.x + 0.05 * truth.z, truth.y, truth.z,
            truth.h, truth.w, truth.l, truth.theta,
        )
        refined = refine_box(init, proposal, kitti_intr, DEConfig(seed=1))
        final = mbr(project_box(refined, kitti_intr))
        assert iou2d(final, proposal) >= 0.95

    def test_never_degrades_loss(self, kitti_intr):
        rng = np.random.default_rng(6)
        cfg = DEConfig(seed=3, max_generations=30)
        for _ in range(25):
            box, proposal = random_config(rng, kitti_intr)
            init_loss = consistency_loss(box, proposal, kitti_intr)
            refined = refine_box(box, proposal, kitti_intr, cfg)
            assert consistency_loss(refined, proposal, kitti_intr) <= init_loss

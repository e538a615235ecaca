import math

import numpy as np
import pytest
from scipy.optimize import minimize

from locfuse.errors import (
    BehindCameraError,
    DegenerateBaselineError,
    DegenerateDenominatorError,
)
from locfuse.geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    fundamental_from_poses,
    inverse,
    project,
    project_points,
    relative_pose,
    sampson_error,
    sampson_errors,
    so3_exp,
    so3_left_jacobian_inverse,
    so3_log,
    unproject,
)

from helpers import CAM, random_pose, rng_for, sampson_oracle


def quarter_turn_z():
    return Pose.from_rotvec(np.array([0.0, 0.0, math.pi / 2.0]), np.zeros(3))


class TestCompose:
    def test_two_quarter_turns_make_a_half_turn(self):
        p = compose(quarter_turn_z(), quarter_turn_z())
        expected = Pose.from_rotvec(np.array([0.0, 0.0, math.pi]), np.zeros(3))
        assert np.allclose(p.R, expected.R, atol=1e-12)

    def test_compose_with_inverse_is_identity(self):
        rng = rng_for(1)
        for _ in range(50):
            p = random_pose(rng)
            e = compose(p, inverse(p))
            assert np.linalg.norm(e.t) < 1e-9
            assert abs(e.q[3]) > 1.0 - 1e-9

    def test_associativity_over_random_poses(self):
        rng = rng_for(2)
        for _ in range(1000):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            assert np.linalg.norm(left.t - right.t) < 1e-9
            assert min(
                np.linalg.norm(left.q - right.q), np.linalg.norm(left.q + right.q)
            ) < 1e-9

    def test_quaternion_stays_normalized_under_long_chains(self):
        rng = rng_for(3)
        p = Pose.identity()
        for _ in range(1000):
            p = compose(p, random_pose(rng, t_scale=1.0))
            assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9


class TestRelativePose:
    def test_round_trip_over_random_pairs(self):
        rng = rng_for(4)
        for _ in range(1000):
            a, b = random_pose(rng), random_pose(rng)
            r = relative_pose(a, b)
            back = compose(a, r)
            assert np.linalg.norm(back.t - b.t) < 1e-9
            assert min(
                np.linalg.norm(back.q - b.q), np.linalg.norm(back.q + b.q)
            ) < 1e-9

    def test_identical_poses_give_identity(self):
        p = random_pose(rng_for(5))
        r = relative_pose(p, p)
        assert np.linalg.norm(r.t) < 1e-12
        assert abs(r.q[3]) > 1.0 - 1e-12


class TestProjection:
    def test_axis_point_hits_principal_point(self):
        uv = project(Pose.identity(), CAM, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(uv, [CAM.cx, CAM.cy])

    def test_point_behind_camera_raises(self):
        with pytest.raises(BehindCameraError):
            project(Pose.identity(), CAM, np.array([0.0, 0.0, -1.0]))

    def test_unproject_then_project_returns_the_pixel(self):
        rng = rng_for(6)
        for _ in range(200):
            pose = random_pose(rng)
            uv = np.array(
                [rng.uniform(0, CAM.width - 1), rng.uniform(0, CAM.height - 1)]
            )
            depth = rng.uniform(0.5, 50.0)
            point = unproject(pose, CAM, uv, depth)
            assert np.linalg.norm(project(pose, CAM, point) - uv) < 1e-9

    def test_vectorized_projection_agrees_with_scalar(self):
        rng = rng_for(7)
        pose = random_pose(rng)
        local = rng.uniform([-5, -5, 2], [5, 5, 30], size=(64, 3))
        pts = (pose.R @ local.T).T + pose.t
        uv, depth = project_points(pose, CAM, pts)
        assert np.all(depth > 0)
        for i in range(len(pts)):
            assert np.linalg.norm(uv[i] - project(pose, CAM, pts[i])) < 1e-9


class TestFundamental:
    def test_pure_x_translation_gives_canonical_form(self):
        unit_cam = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5, width=1, height=1)
        a = Pose.identity()
        b = Pose(np.array([0, 0, 0, 1.0]), np.array([0.7, 0.0, 0.0]))
        F = fundamental_from_poses(a, b, unit_cam, unit_cam)
        target = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        Fn = F / np.linalg.norm(F)
        tn = target / np.linalg.norm(target)
        assert min(np.linalg.norm(Fn - tn), np.linalg.norm(Fn + tn)) < 1e-12

    def test_rank_two_over_random_pairs(self):
        rng = rng_for(8)
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            F = fundamental_from_poses(a, b, CAM, CAM)
            s = np.linalg.svd(F, compute_uv=False)
            assert s[2] / s[0] < 1e-10

    def test_zero_baseline_raises(self):
        p = random_pose(rng_for(9))
        q = Pose(p.q, p.t.copy())
        with pytest.raises(DegenerateBaselineError):
            fundamental_from_poses(p, q, CAM, CAM)

    def test_noiseless_correspondences_satisfy_epipolar_constraint(self):
        rng = rng_for(10)
        for _ in range(50):
            a = random_pose(rng, t_scale=2.0, angle_scale=0.2)
            b = Pose.from_rt(a.R, a.t + rng.normal(size=3))
            local = rng.uniform([-4, -4, 5], [4, 4, 40], size=(30, 3))
            pts = (a.R @ local.T).T + a.t
            F = fundamental_from_poses(a, b, CAM, CAM)
            uv_a, da = project_points(a, CAM, pts)
            uv_b, db = project_points(b, CAM, pts)
            keep = (da > 0) & (db > 0)
            errs = sampson_errors(F, uv_a[keep], uv_b[keep])
            assert np.all(errs < 1e-12)


def geometric_distance_oracle(F, x_a, x_b):
    """Exact minimal total squared correction subject to the epipolar
    constraint, found numerically; independent of the Sampson formula."""

    def cost(z):
        return (z[0] - x_a[0]) ** 2 + (z[1] - x_a[1]) ** 2 + (z[2] - x_b[0]) ** 2 + (
            z[3] - x_b[1]
        ) ** 2

    def constraint(z):
        xa = np.array([z[0], z[1], 1.0])
        xb = np.array([z[2], z[3], 1.0])
        return xb @ F @ xa

    z0 = np.array([x_a[0], x_a[1], x_b[0], x_b[1]])
    res = minimize(
        cost,
        z0,
        constraints=[{"type": "eq", "fun": constraint}],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 200},
    )
    assert res.success
    return float(res.fun)


class TestSampson:
    def test_zero_for_exact_correspondences(self):
        rng = rng_for(11)
        a = random_pose(rng, angle_scale=0.1)
        b = Pose.from_rt(a.R, a.t + np.array([1.0, 0.2, 0.1]))
        point = a.t + a.R @ np.array([0.5, -0.3, 12.0])
        F = fundamental_from_poses(a, b, CAM, CAM)
        e = sampson_error(F, project(a, CAM, point), project(b, CAM, point))
        assert e < 1e-12

    def test_matches_independent_formula_on_random_cases(self):
        rng = rng_for(12)
        checked = 0
        while checked < 100:
            a, b = random_pose(rng), random_pose(rng)
            try:
                F = fundamental_from_poses(a, b, CAM, CAM)
            except DegenerateBaselineError:
                continue
            x_a = rng.uniform(0, [CAM.width, CAM.height])
            x_b = rng.uniform(0, [CAM.width, CAM.height])
            ours = sampson_error(F, x_a, x_b)
            ref = sampson_oracle(F, x_a, x_b)
            assert abs(ours - ref) <= 1e-10 * max(abs(ref), 1e-30)
            checked += 1

    def test_perpendicular_unit_push_tracks_geometric_distance(self):
        # Near-rectified stereo pair: the correction splits between the two
        # images, so the exact geometric residual for a 1 px push is 0.5 px^2.
        a = Pose.identity()
        b = Pose(np.array([0, 0, 0, 1.0]), np.array([0.8, 0.0, 0.0]))
        F = fundamental_from_poses(a, b, CAM, CAM)
        point = np.array([0.4, -0.2, 9.0])
        x_a = project(a, CAM, point)
        x_b = project(b, CAM, point) + np.array([0.0, 1.0])
        expected = geometric_distance_oracle(F, x_a, x_b)
        assert expected == pytest.approx(0.5, abs=1e-6)
        e = sampson_error(F, x_a, x_b)
        assert abs(e - expected) <= 0.2 * expected

    def test_vanishing_denominator_raises(self):
        F = np.zeros((3, 3))
        F[2, 2] = 1.0
        with pytest.raises(DegenerateDenominatorError):
            sampson_error(F, np.array([1.0, 2.0]), np.array([3.0, 4.0]))


class TestSo3Helpers:
    def test_log_exp_round_trip_across_angle_range(self):
        rng = rng_for(13)
        for angle in [1e-9, 1e-6, 0.1, 1.0, 2.0, math.pi - 1e-4, math.pi - 1e-7]:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            v = axis * angle
            back = so3_log(so3_exp(v))
            assert np.linalg.norm(back - v) < 1e-6 * max(angle, 1.0)

    def test_left_jacobian_inverse_linearizes_composition(self):
        rng = rng_for(14)
        for _ in range(50):
            phi = rng.normal(size=3)
            phi *= rng.uniform(0.05, 2.5) / np.linalg.norm(phi)
            delta = rng.normal(size=3) * 1e-6
            lhs = so3_log(so3_exp(delta) @ so3_exp(phi))
            rhs = phi + so3_left_jacobian_inverse(phi) @ delta
            assert np.linalg.norm(lhs - rhs) < 1e-9

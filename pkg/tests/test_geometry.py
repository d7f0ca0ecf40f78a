"""Fisheye model tests: closed-form cases, round trips, and rig coverage."""

import math

import numpy as np
import pytest

from surroundpark import geometry as geo


@pytest.fixture
def level_cam():
    intr = geo.default_intrinsics(1280, 384)
    pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=0.0)
    return intr, pose


def sample_in_fov_pixels(intr, n, seed):
    """Random pixels strictly inside the FOV circle."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 0.98 * intr.focal_px * intr.max_theta, size=n)
    ang = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([intr.cx + r * np.cos(ang), intr.cy + r * np.sin(ang)], axis=1)


class TestProject:
    def test_optical_axis_hits_principal_point(self, level_cam):
        intr, pose = level_cam
        px, ok = geo.project((5.0, 0.0, 1.0), intr, pose)
        assert ok
        np.testing.assert_allclose(px, [intr.cx, intr.cy], atol=1e-9)

    def test_fov_edge_maps_to_image_edge(self):
        # f = 640 / 1.65806 = 385.99 px/rad fixed by the r_max/theta_max construction
        intr = geo.default_intrinsics(1280, 384)
        assert abs(intr.focal_px - 640.0 / math.radians(95.0)) < 1e-9
        assert abs(intr.focal_px - 385.99) < 0.01
        pose = geo.make_pose((0.0, 0.0, 1.0), 0.0, 0.0)
        # direction at exactly max_theta to the left of the axis
        d = np.array([math.cos(intr.max_theta), math.sin(intr.max_theta), 0.0])
        px, ok = geo.project(pose.translation + 10 * d, intr, pose)
        assert ok
        r = np.hypot(px[0] - intr.cx, px[1] - intr.cy)
        assert abs(r - 640.0) < 1e-6

    def test_point_at_camera_center_rejected(self, level_cam):
        intr, pose = level_cam
        with pytest.raises(ValueError, match="camera center"):
            geo.project(pose.translation, intr, pose)

    def test_out_of_fov_flag(self, level_cam):
        intr, pose = level_cam
        _, ok = geo.project((-5.0, 0.0, 1.0), intr, pose)  # behind the camera
        assert not ok

    def test_project_unproject_round_trip(self, level_cam):
        intr, pose = level_cam
        px = sample_in_fov_pixels(intr, 1000, seed=0)
        rays = geo.unproject(px, intr, pose)
        back, ok = geo.project(pose.translation + 3.7 * rays, intr, pose)
        assert ok.all()
        assert np.abs(back - px).max() < 1e-6


class TestUnproject:
    def test_principal_point_gives_optical_axis(self, level_cam):
        intr, pose = level_cam
        ray = geo.unproject((intr.cx, intr.cy), intr, pose)
        axis = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(ray, axis, atol=1e-12)

    def test_out_of_fov_rejected(self, level_cam):
        intr, pose = level_cam
        r_max = intr.focal_px * intr.max_theta
        with pytest.raises(ValueError, match="outside the field of view"):
            geo.unproject((intr.cx + r_max + 5.0, intr.cy), intr, pose)

    def test_unproject_project_identity_on_world_points(self):
        intr = geo.default_intrinsics(1280, 384)
        pose = geo.make_pose((1.0, -0.5, 0.8), yaw_deg=30.0, pitch_deg=20.0, roll_deg=5.0)
        rng = np.random.default_rng(1)
        # world points in front of the camera
        axis = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        pts = pose.translation + rng.uniform(1, 10, (500, 1)) * axis + rng.normal(0, 0.8, (500, 3))
        px, ok = geo.project(pts, intr, pose)
        keep = ok & (np.hypot(px[:, 0] - intr.cx, px[:, 1] - intr.cy) < 0.99 * intr.focal_px * intr.max_theta)
        rays = geo.unproject(px[keep], intr, pose)
        true_dirs = pts[keep] - pose.translation
        true_dirs /= np.linalg.norm(true_dirs, axis=1, keepdims=True)
        # chord length equals the angle to first order and is well conditioned near 0
        ang = 2 * np.arcsin(np.linalg.norm(rays - true_dirs, axis=1) / 2)
        assert ang.max() < 1e-8


class TestFootpoint:
    def test_straight_down_camera(self):
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=90.0)
        xy = geo.footpoint_to_ground((intr.cx, intr.cy), intr, pose)
        np.testing.assert_allclose(xy, [0.0, 0.0], atol=1e-9)

    def test_horizontal_ray_rejected(self):
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=0.0)
        with pytest.raises(ValueError, match="above horizon"):
            geo.footpoint_to_ground((intr.cx, intr.cy), intr, pose)

    def test_pitch_30_ground_range(self):
        # closed-form ray/plane oracle: range = h / tan(pitch) = 1/tan(30) = 1.7321
        intr = geo.default_intrinsics(1280, 384)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=30.0)
        xy = geo.footpoint_to_ground((intr.cx, intr.cy), intr, pose)
        assert abs(xy[0] - 1.0 / math.tan(math.radians(30.0))) < 1e-6
        assert abs(xy[0] - 1.7321) < 1e-4
        assert abs(xy[1]) < 1e-9

    def test_reprojection_consistency(self):
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((2.0, 0.0, 0.7), yaw_deg=0.0, pitch_deg=25.0)
        rng = np.random.default_rng(2)
        count = 0
        for _ in range(300):
            px = np.array([rng.uniform(0, 320), rng.uniform(48, 96)])
            try:
                xy = geo.footpoint_to_ground(px, intr, pose)
            except ValueError:
                continue
            back, ok = geo.project((xy[0], xy[1], 0.0), intr, pose)
            assert ok
            assert np.hypot(*(back - px)) < 1e-4
            count += 1
        assert count > 100

    def test_lower_pixels_are_closer(self):
        # monotonicity along the central column below the horizon
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((0.0, 0.0, 0.9), yaw_deg=0.0, pitch_deg=40.0)
        hrow = geo.horizon_row(intr, pose)
        ranges = []
        for v in range(max(hrow + 1, 1), 96, 5):
            xy = geo.footpoint_to_ground((intr.cx, float(v)), intr, pose)
            ranges.append(np.hypot(*(xy - pose.translation[:2])))
        assert all(a > b for a, b in zip(ranges, ranges[1:]))

    def test_vectorized_matches_scalar(self):
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((0.0, 0.9, 0.9), yaw_deg=90.0, pitch_deg=40.0)
        px = sample_in_fov_pixels(intr, 200, seed=3)
        pts, ok = geo.ground_points(px, intr, pose)
        for i in range(200):
            try:
                ref = geo.footpoint_to_ground(px[i], intr, pose)
            except ValueError:
                assert not ok[i]
                continue
            assert ok[i]
            np.testing.assert_allclose(pts[i], ref, atol=1e-9)


class TestHorizonRow:
    def test_level_camera(self):
        intr = geo.default_intrinsics(1280, 384)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=0.0)
        assert geo.horizon_row(intr, pose) == int(intr.cy)

    def test_pitched_down_is_above_center(self):
        intr = geo.default_intrinsics(1280, 384)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=10.0)
        assert geo.horizon_row(intr, pose) < intr.cy

    def test_pitch_30_clamps_to_zero(self):
        # scalar evaluation of r = f*theta: 192 - 385.99*0.523599 = -10.1 -> clamp 0
        intr = geo.default_intrinsics(1280, 384)
        pose = geo.make_pose((0.0, 0.0, 1.0), yaw_deg=0.0, pitch_deg=30.0)
        raw = intr.cy - intr.focal_px * math.radians(30.0)
        assert raw < 0
        assert geo.horizon_row(intr, pose) == 0


class TestRig:
    def test_default_rig_covers_full_circle(self):
        rig = geo.default_rig()
        assert rig.covers_full_circle(step_deg=1.0)

    def test_pose_invariants(self):
        for _, _, pose in geo.default_rig():
            np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9

    def test_front_camera_axis(self):
        _, pose = geo.default_rig()["front"]
        axis = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        expect = [math.cos(math.radians(25)), 0.0, -math.sin(math.radians(25))]
        np.testing.assert_allclose(axis, expect, atol=1e-12)

    def test_calibration_roundtrip(self, tmp_path):
        rig = geo.default_rig()
        path = tmp_path / "rig.json"
        geo.save_rig(rig, path)
        rig2 = geo.load_rig(path)
        for name, intr, pose in rig:
            intr2, pose2 = rig2[name]
            assert intr2 == intr
            np.testing.assert_allclose(pose2.rotation, pose.rotation, atol=1e-12)
            np.testing.assert_allclose(pose2.translation, pose.translation, atol=1e-12)

    def test_missing_camera_rejected(self):
        intr = geo.default_intrinsics(320, 96)
        pose = geo.make_pose((0, 0, 1), 0, 10)
        with pytest.raises(ValueError, match="missing cameras"):
            geo.CameraRig(cameras={"front": (intr, pose)})

"""Equidistant fisheye camera model and the four-camera surround rig.

Projection follows the ideal equidistant mapping r = f * theta, where
theta is the angle between a viewing ray and the optical axis and r is
the image radius in pixels from the principal point.  The world frame is
z-up with the ground plane at z = 0 and the ego origin at the rear-axle
center; ego heading is +x, left is +y.

Camera orientation is given as yaw/pitch/roll of the camera body
(vehicle convention: x forward, y left, z up; angles applied z, y', x'';
positive pitch tips the view downward).  The optical frame is z forward,
x right in the image, y down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_MAX_THETA = math.radians(95.0)  # 190 degree horizontal field of view

# optical-from-body axis permutation: x_opt=-y_body, y_opt=-z_body, z_opt=x_body
_OPTICAL_FROM_BODY = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class FisheyeIntrinsics:
    focal_px: float
    cx: float
    cy: float
    width: int
    height: int
    max_theta: float = DEFAULT_MAX_THETA

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")
        if not 0 < self.max_theta < math.pi:
            raise ValueError(f"max_theta must lie in (0, pi), got {self.max_theta}")


@dataclass
class CameraPose:
    """camera-from-world rotation and camera center in the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        r = self.rotation
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation determinant is not +1")


def rotation_from_ypr(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Body-from-world rotation transposed, i.e. world-from-body, for z,y',x'' angles."""
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    cr, sr = math.cos(math.radians(roll_deg)), math.sin(math.radians(roll_deg))
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def make_pose(translation, yaw_deg: float, pitch_deg: float, roll_deg: float = 0.0) -> CameraPose:
    """Camera pose from mounting position and body yaw/pitch/roll degrees."""
    world_from_body = rotation_from_ypr(yaw_deg, pitch_deg, roll_deg)
    cam_from_world = _OPTICAL_FROM_BODY @ world_from_body.T
    return CameraPose(rotation=cam_from_world, translation=np.asarray(translation, dtype=np.float64))


@dataclass
class CameraRig:
    """Four named fisheye cameras: front, rear, left, right."""

    cameras: dict  # name -> (FisheyeIntrinsics, CameraPose)

    NAMES = ("front", "rear", "left", "right")

    def __post_init__(self):
        missing = [n for n in self.NAMES if n not in self.cameras]
        if missing:
            raise ValueError(f"rig is missing cameras: {missing}")

    def __iter__(self):
        return ((name, *self.cameras[name]) for name in self.NAMES)

    def __getitem__(self, name: str):
        return self.cameras[name]

    def covers_full_circle(self, step_deg: float = 1.0) -> bool:
        """Sampled check that every azimuth lies within max_theta of some camera axis."""
        for az in np.arange(0.0, 360.0, step_deg):
            d = np.array([math.cos(math.radians(az)), math.sin(math.radians(az)), 0.0])
            ok = False
            for _, intr, pose in self:
                axis = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
                ang = math.acos(min(1.0, max(-1.0, float(d @ axis))))
                if ang <= intr.max_theta:
                    ok = True
                    break
            if not ok:
                return False
        return True


def default_intrinsics(width: int, height: int, max_theta: float = DEFAULT_MAX_THETA) -> FisheyeIntrinsics:
    """Focal chosen so the horizontal FOV edge lands exactly on the image edge."""
    return FisheyeIntrinsics(
        focal_px=(width / 2.0) / max_theta,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        max_theta=max_theta,
    )


def default_rig(width: int = 320, height: int = 96) -> CameraRig:
    """Plausible surround-view mounting with overlapping ground coverage.

    Side cameras are pitched only slightly more than the front/rear pair:
    with the wide-but-short equidistant image (vertical half-FOV about
    28 degrees at the default aspect), a steeper pitch would put all
    ground beyond a few meters above the image's top edge.
    """
    intr = default_intrinsics(width, height)
    return CameraRig(
        cameras={
            "front": (intr, make_pose((2.0, 0.0, 0.7), yaw_deg=0.0, pitch_deg=25.0)),
            "rear": (intr, make_pose((-2.0, 0.0, 0.7), yaw_deg=180.0, pitch_deg=25.0)),
            "left": (intr, make_pose((0.0, 0.9, 0.9), yaw_deg=90.0, pitch_deg=28.0)),
            "right": (intr, make_pose((0.0, -0.9, 0.9), yaw_deg=-90.0, pitch_deg=28.0)),
        }
    )


# ---------------------------------------------------------------------------
# projection / unprojection
# ---------------------------------------------------------------------------


def project(point_world, intrinsics: FisheyeIntrinsics, pose: CameraPose):
    """Project world point(s) to pixel(s); returns (pixels, in_fov).

    Accepts a single (3,) point or an (N,3) array; returns matching
    (2,)/(N,2) pixels and a bool/bool-array in-FOV flag.
    """
    pts = np.asarray(point_world, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    p_cam = (pts - pose.translation) @ pose.rotation.T
    norms = np.linalg.norm(p_cam, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("cannot project a point at the camera center")
    rxy = np.hypot(p_cam[:, 0], p_cam[:, 1])
    theta = np.arctan2(rxy, p_cam[:, 2])
    r = intrinsics.focal_px * theta
    safe = np.where(rxy > 1e-12, rxy, 1.0)
    u = intrinsics.cx + r * np.where(rxy > 1e-12, p_cam[:, 0] / safe, 0.0)
    v = intrinsics.cy + r * np.where(rxy > 1e-12, p_cam[:, 1] / safe, 0.0)
    px = np.stack([u, v], axis=1)
    in_fov = theta <= intrinsics.max_theta
    if single:
        return px[0], bool(in_fov[0])
    return px, in_fov


def unproject(pixel, intrinsics: FisheyeIntrinsics, pose: CameraPose):
    """Unit world-frame ray(s) through pixel(s), anchored at the camera center.

    Raises for pixels whose radius maps beyond the field of view.
    """
    px = np.asarray(pixel, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    dx = px[:, 0] - intrinsics.cx
    dy = px[:, 1] - intrinsics.cy
    r = np.hypot(dx, dy)
    theta = r / intrinsics.focal_px
    if np.any(theta > intrinsics.max_theta + 1e-12):
        bad = px[theta > intrinsics.max_theta + 1e-12][0]
        raise ValueError(f"pixel {tuple(bad)} is outside the field of view")
    safe = np.where(r > 1e-12, r, 1.0)
    st = np.sin(theta)
    ray_cam = np.stack(
        [
            np.where(r > 1e-12, st * dx / safe, 0.0),
            np.where(r > 1e-12, st * dy / safe, 0.0),
            np.cos(theta),
        ],
        axis=1,
    )
    ray_world = ray_cam @ pose.rotation
    if single:
        return ray_world[0]
    return ray_world


def unproject_grid(intrinsics: FisheyeIntrinsics, pose: CameraPose):
    """Per-pixel world rays for a full image.

    Returns (rays [H,W,3], valid [H,W]); out-of-FOV pixels (image corners
    beyond max_theta) are marked invalid and carry a zero ray.
    """
    h, w = intrinsics.height, intrinsics.width
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dx = u - intrinsics.cx
    dy = v - intrinsics.cy
    r = np.hypot(dx, dy)
    theta = r / intrinsics.focal_px
    valid = theta <= intrinsics.max_theta
    safe = np.where(r > 1e-12, r, 1.0)
    st = np.sin(theta)
    ray_cam = np.stack(
        [
            np.where(r > 1e-12, st * dx / safe, 0.0),
            np.where(r > 1e-12, st * dy / safe, 0.0),
            np.cos(theta),
        ],
        axis=-1,
    )
    rays = ray_cam @ pose.rotation
    rays[~valid] = 0.0
    return rays, valid


def footpoint_to_ground(pixel, intrinsics: FisheyeIntrinsics, pose: CameraPose) -> np.ndarray:
    """Intersect the pixel's viewing ray with the ground plane z = 0.

    Returns world (x, y).  Raises "above horizon" when the ray does not
    point below the horizontal (occluded or non-ground foot-points are
    out of scope here).
    """
    ray = unproject(pixel, intrinsics, pose)
    if ray[2] >= -1e-9:
        raise ValueError("above horizon: ray does not intersect the ground plane")
    t = -pose.translation[2] / ray[2]
    hit = pose.translation + t * ray
    return hit[:2]


def ground_points(pixels: np.ndarray, intrinsics: FisheyeIntrinsics, pose: CameraPose):
    """Vectorized ray/ground intersection for (N,2) pixels.

    Returns (points (N,2), ok (N,)); rows with out-of-FOV pixels or rays
    at/above the horizontal have ok=False and undefined coordinates.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dx = px[:, 0] - intrinsics.cx
    dy = px[:, 1] - intrinsics.cy
    r = np.hypot(dx, dy)
    theta = r / intrinsics.focal_px
    ok = theta <= intrinsics.max_theta
    safe = np.where(r > 1e-12, r, 1.0)
    st = np.sin(theta)
    ray_cam = np.stack(
        [
            np.where(r > 1e-12, st * dx / safe, 0.0),
            np.where(r > 1e-12, st * dy / safe, 0.0),
            np.cos(theta),
        ],
        axis=1,
    )
    rays = ray_cam @ pose.rotation
    ok &= rays[:, 2] < -1e-9
    t = np.where(ok, -pose.translation[2] / np.where(ok, rays[:, 2], -1.0), 0.0)
    pts = pose.translation[None, :2] + t[:, None] * rays[:, :2]
    return pts, ok


def horizon_row(intrinsics: FisheyeIntrinsics, pose: CameraPose) -> int:
    """Image row of the horizon along the optical axis azimuth, clamped to [0, H).

    Projects the horizontal direction at infinity sharing the optical
    axis azimuth; rows at or below the result can contain ground.  When
    that direction falls outside the FOV, 0 is returned so the whole
    image is treated as below the horizon.
    """
    axis = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
    hxy = math.hypot(axis[0], axis[1])
    if hxy < 1e-12:
        return 0
    d = np.array([axis[0] / hxy, axis[1] / hxy, 0.0])
    p_cam = pose.rotation @ d
    theta = math.atan2(math.hypot(p_cam[0], p_cam[1]), p_cam[2])
    if theta > intrinsics.max_theta:
        return 0
    rxy = math.hypot(p_cam[0], p_cam[1])
    r = intrinsics.focal_px * theta
    v = intrinsics.cy + (r * p_cam[1] / rxy if rxy > 1e-12 else 0.0)
    return int(min(max(math.ceil(v), 0), intrinsics.height - 1))


# ---------------------------------------------------------------------------
# calibration file
# ---------------------------------------------------------------------------


def rig_to_json(rig: CameraRig) -> dict:
    out = {}
    for name, intr, pose in rig:
        world_from_body = (_OPTICAL_FROM_BODY.T @ pose.rotation).T
        yaw = math.degrees(math.atan2(world_from_body[1, 0], world_from_body[0, 0]))
        pitch = math.degrees(math.asin(max(-1.0, min(1.0, -world_from_body[2, 0]))))
        roll = math.degrees(math.atan2(world_from_body[2, 1], world_from_body[2, 2]))
        out[name] = {
            "focal_px": intr.focal_px,
            "cx": intr.cx,
            "cy": intr.cy,
            "W": intr.width,
            "H": intr.height,
            "max_theta_deg": math.degrees(intr.max_theta),
            "yaw_deg": yaw,
            "pitch_deg": pitch,
            "roll_deg": roll,
            "translation": [float(x) for x in pose.translation],
        }
    return out


def rig_from_json(data: dict) -> CameraRig:
    cameras = {}
    for name, c in data.items():
        intr = FisheyeIntrinsics(
            focal_px=c["focal_px"],
            cx=c["cx"],
            cy=c["cy"],
            width=c["W"],
            height=c["H"],
            max_theta=math.radians(c["max_theta_deg"]),
        )
        pose = make_pose(c["translation"], c["yaw_deg"], c["pitch_deg"], c.get("roll_deg", 0.0))
        cameras[name] = (intr, pose)
    return CameraRig(cameras=cameras)


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=2, sort_keys=True))


def load_rig(path) -> CameraRig:
    return rig_from_json(json.loads(Path(path).read_text()))

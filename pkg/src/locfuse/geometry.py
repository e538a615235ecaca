"""Rigid-body poses, pinhole projection, and two-view epipolar entities.

Conventions used throughout the package:

* a ``Pose`` maps camera-frame points into the world frame
  (``x_world = R @ x_cam + t``); the translation is the camera center,
* quaternions are scalar-last ``(qx, qy, qz, qw)`` and kept normalized with
  a non-negative scalar part so serialization is reproducible,
* pixel coordinates are ``(u, v)`` with ``u`` along image columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateBaselineError,
    DegenerateDenominatorError,
)

BASELINE_EPS = 1e-12
SAMPSON_EPS = 1e-15


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (Rodrigues)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    K = hat(rotvec)
    if theta < 1e-8:
        # second-order series keeps the result orthonormal to round-off
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi].

    Goes through the quaternion form, which stays well conditioned both near
    the identity and near half-turns.
    """
    q = matrix_to_quat(R)
    s = float(np.linalg.norm(q[:3]))
    w = float(q[3])
    if s < 1e-10:
        return 2.0 * q[:3] / w
    theta = 2.0 * math.atan2(s, w)
    return (theta / s) * q[:3]


def so3_left_jacobian_inverse(rotvec: np.ndarray) -> np.ndarray:
    """Inverse of the left Jacobian of SO(3); used for rotation residuals."""
    theta = float(np.linalg.norm(rotvec))
    K = hat(rotvec)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (1.0 / 12.0) * (K @ K)
    c = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-last quaternion from a rotation matrix (Shepperd's method)."""
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    trace = m00 + m11 + m22
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (m21 - m12) / s
        y = (m02 - m20) / s
        z = (m10 - m01) / s
    elif m00 > m11 and m00 > m22:
        s = math.sqrt(1.0 + m00 - m11 - m22) * 2.0
        w = (m21 - m12) / s
        x = 0.25 * s
        y = (m01 + m10) / s
        z = (m02 + m20) / s
    elif m11 > m22:
        s = math.sqrt(1.0 + m11 - m00 - m22) * 2.0
        w = (m02 - m20) / s
        x = (m01 + m10) / s
        y = 0.25 * s
        z = (m12 + m21) / s
    else:
        s = math.sqrt(1.0 + m22 - m00 - m11) * 2.0
        w = (m10 - m01) / s
        x = (m02 + m20) / s
        y = (m12 + m21) / s
        z = 0.25 * s
    return _canonical_quat(np.array([x, y, z, w]))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("quaternion norm must be positive and finite")
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform (unit quaternion + translation)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = _canonical_quat(self.q)
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.q)
        R.setflags(write=False)
        return R

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @staticmethod
    def from_rotvec(rotvec: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose.from_rt(so3_exp(rotvec), t)


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a after b; quaternion renormalized to keep drift bounded."""
    q = quat_multiply(a.q, b.q)
    t = a.R @ b.t + a.t
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    Rt = p.R.T
    return Pose(np.array([-p.q[0], -p.q[1], -p.q[2], p.q[3]]), -(Rt @ p.t))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose r with compose(a, r) == b."""
    return compose(inverse(a), b)


def rotation_angle(a: Pose, b: Pose) -> float:
    """Absolute angle in radians between the two orientations."""
    return float(np.linalg.norm(so3_log(a.R.T @ b.R)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Single-camera pinhole model; distortion is assumed removed upstream."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @cached_property
    def matrix(self) -> np.ndarray:
        K = np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )
        K.setflags(write=False)
        return K

    @cached_property
    def matrix_inv(self) -> np.ndarray:
        Ki = np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )
        Ki.setflags(write=False)
        return Ki

    def contains(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= margin)
            & (uv[:, 0] <= self.width - 1 - margin)
            & (uv[:, 1] >= margin)
            & (uv[:, 1] <= self.height - 1 - margin)
        )


def project(pose: Pose, cam: CameraIntrinsics, point: np.ndarray) -> np.ndarray:
    """Pixel of a world point; raises BehindCameraError for depth <= 0."""
    p_cam = pose.R.T @ (np.asarray(point, dtype=float) - pose.t)
    if p_cam[2] <= 0.0:
        raise BehindCameraError(f"depth {p_cam[2]:.6g} is not positive")
    return np.array(
        [
            cam.fx * p_cam[0] / p_cam[2] + cam.cx,
            cam.fy * p_cam[1] / p_cam[2] + cam.cy,
        ]
    )


def unproject(pose: Pose, cam: CameraIntrinsics, uv: np.ndarray, depth: float) -> np.ndarray:
    """World point for a pixel at the given camera-frame depth."""
    if depth <= 0.0:
        raise BehindCameraError("unproject needs a positive depth")
    u, v = uv
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return pose.R @ (depth * ray) + pose.t


def project_points(pose: Pose, cam: CameraIntrinsics, points: np.ndarray):
    """Vectorized projection.

    Returns (uv, depth); rows with depth <= 0 hold garbage pixels and must be
    masked by the caller. This keeps hot loops free of per-point exceptions.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p_cam = (pts - pose.t) @ pose.R
    depth = p_cam[:, 2]
    safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = cam.fx * p_cam[:, 0] / safe + cam.cx
    uv[:, 1] = cam.fy * p_cam[:, 1] / safe + cam.cy
    return uv, depth


def fundamental_from_poses(
    pose_a: Pose, pose_b: Pose, cam_a: CameraIntrinsics, cam_b: CameraIntrinsics
) -> np.ndarray:
    """Fundamental matrix with x_b^T F x_a = 0 for posed cameras a and b."""
    R_ba = pose_b.R.T @ pose_a.R
    t_ba = pose_b.R.T @ (pose_a.t - pose_b.t)
    baseline = float(np.linalg.norm(t_ba))
    if baseline <= BASELINE_EPS:
        raise DegenerateBaselineError(f"baseline {baseline:.3g} m")
    E = hat(t_ba) @ R_ba
    return cam_b.matrix_inv.T @ E @ cam_a.matrix_inv


def sampson_error(F: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> float:
    """First-order geometric (Sampson) error in squared pixels."""
    xa = np.array([x_a[0], x_a[1], 1.0])
    xb = np.array([x_b[0], x_b[1], 1.0])
    Fa = F @ xa
    Ftb = F.T @ xb
    denom = Fa[0] ** 2 + Fa[1] ** 2 + Ftb[0] ** 2 + Ftb[1] ** 2
    if denom <= SAMPSON_EPS:
        raise DegenerateDenominatorError("all Sampson derivative terms vanish")
    r = float(xb @ Fa)
    return r * r / float(denom)


def sampson_errors(F: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Vectorized Sampson error; degenerate denominators are clamped."""
    pts_a = np.atleast_2d(pts_a)
    pts_b = np.atleast_2d(pts_b)
    ones = np.ones((len(pts_a), 1))
    xa = np.hstack([pts_a, ones])
    xb = np.hstack([pts_b, ones])
    Fa = xa @ F.T
    Ftb = xb @ F
    r = np.einsum("ij,ij->i", xb, Fa)
    denom = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    return r * r / np.maximum(denom, SAMPSON_EPS)

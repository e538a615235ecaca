"""Shared test utilities: random states and small independent oracles."""

from __future__ import annotations

import numpy as np

from locfuse.geometry import CameraIntrinsics, Pose, so3_exp

CAM = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def rng_for(seed):
    """All tests draw from the same fixed-algorithm 64-bit PCG stream."""
    return np.random.Generator(np.random.PCG64(seed))


def random_pose(rng, t_scale=5.0, angle_scale=None):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    if angle_scale is None:
        angle = rng.uniform(0.0, np.pi)
    else:
        angle = rng.normal() * angle_scale
    R = so3_exp(axis * angle)
    t = rng.normal(size=3) * t_scale
    return Pose.from_rt(R, t)


def perturb_pose(pose, rng, t_sigma, rot_sigma):
    axis = rng.normal(size=3)
    n = np.linalg.norm(axis)
    if n > 0:
        axis /= n
    R = so3_exp(axis * rng.normal() * rot_sigma) @ pose.R
    return Pose.from_rt(R, pose.t + rng.normal(size=3) * t_sigma)


def sampson_oracle(F, x_a, x_b):
    """Scalar re-derivation of the Sampson error, kept loop-and-index based
    on purpose so it shares no code path with the package implementation."""
    xa = [float(x_a[0]), float(x_a[1]), 1.0]
    xb = [float(x_b[0]), float(x_b[1]), 1.0]
    line_b = [0.0, 0.0, 0.0]
    line_a = [0.0, 0.0, 0.0]
    for i in range(3):
        for j in range(3):
            line_b[i] += float(F[i][j]) * xa[j]
            line_a[j] += float(F[i][j]) * xb[i]
    num = 0.0
    for i in range(3):
        num += xb[i] * line_b[i]
    denom = line_b[0] ** 2 + line_b[1] ** 2 + line_a[0] ** 2 + line_a[1] ** 2
    return num * num / denom

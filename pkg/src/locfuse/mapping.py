"""Session map construction: epipolar pruning, triangulation, structure refinement.

A session map is the per-session output of an offline reconstruction: posed
frames plus triangulated points with their observations. Frame poses are
treated as fixed ground truth here; only structure is ever refined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityError,
    InsufficientParallaxError,
    TooFewMatchesError,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    fundamental_from_poses,
    project_points,
    sampson_errors,
)
from .matches import MatchSet2D2D


@dataclass
class MapFrame:
    frame_id: int
    timestamp: float
    pose: Pose


@dataclass
class MapPoint:
    point_id: int
    position: np.ndarray
    observations: list  # of (frame_id, uv (2,))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class SessionMap:
    session_id: int
    frames: list
    points: list

    def pose_of(self, frame_id: int) -> Pose:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f.pose
        raise KeyError(f"frame {frame_id} not in session {self.session_id}")

    def frame_index(self) -> dict:
        return {f.frame_id: f for f in self.frames}


def prune_epipolar(
    matches: MatchSet2D2D,
    pose_a: Pose,
    pose_b: Pose,
    cam: CameraIntrinsics,
    threshold: float = 4.0,
) -> MatchSet2D2D:
    """Drop correspondences whose Sampson error under the posed-pair
    fundamental matrix exceeds the threshold (squared pixels)."""
    F = fundamental_from_poses(pose_a, pose_b, cam, cam)
    if len(matches) == 0:
        return MatchSet2D2D(matches.frame_a, matches.frame_b, matches.uv_a, matches.uv_b)
    errs = sampson_errors(F, matches.uv_a, matches.uv_b)
    keep = errs <= threshold
    return MatchSet2D2D(
        matches.frame_a, matches.frame_b, matches.uv_a[keep], matches.uv_b[keep]
    )


def _reprojection_residuals(position, observations, pose_index, cam):
    """Stacked pixel residuals and Jacobian rows for one point."""
    n = len(observations)
    r = np.empty(2 * n)
    J = np.empty((2 * n, 3))
    for i, (frame_id, uv) in enumerate(observations):
        pose = pose_index[frame_id]
        p_cam = pose.R.T @ (position - pose.t)
        z = p_cam[2]
        if z <= 1e-9:
            # behind-camera during a trial step: huge residual, flat Jacobian
            r[2 * i : 2 * i + 2] = 1e6
            J[2 * i : 2 * i + 2] = 0.0
            continue
        u = cam.fx * p_cam[0] / z + cam.cx
        v = cam.fy * p_cam[1] / z + cam.cy
        r[2 * i] = u - uv[0]
        r[2 * i + 1] = v - uv[1]
        A = np.array(
            [
                [cam.fx / z, 0.0, -cam.fx * p_cam[0] / (z * z)],
                [0.0, cam.fy / z, -cam.fy * p_cam[1] / (z * z)],
            ]
        )
        J[2 * i : 2 * i + 2] = A @ pose.R.T
    return r, J


def _refine_point(position, observations, pose_index, cam, max_iters=10):
    """Damped least-squares polish of a single point, step-rejecting."""
    x = position.copy()
    r, J = _reprojection_residuals(x, observations, pose_index, cam)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_iters):
        H = J.T @ J
        g = J.T @ r
        try:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
        except np.linalg.LinAlgError:
            break
        x_new = x + step
        r_new, J_new = _reprojection_residuals(x_new, observations, pose_index, cam)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            x, r, J, cost = x_new, r_new, J_new, cost_new
            lam = max(lam * 0.3, 1e-9)
            if np.linalg.norm(step) < 1e-12:
                break
        else:
            lam *= 4.0
            if lam > 1e6:
                break
    return x, cost


def triangulate(
    observations,
    cam: CameraIntrinsics,
    min_angle_deg: float = 1.0,
) -> np.ndarray:
    """Triangulate one point from posed observations [(Pose, uv), ...].

    Homogeneous linear (DLT) solve followed by a damped least-squares
    refinement. Raises for fewer than two views, for parallax below
    min_angle_deg, and for a result behind any camera.
    """
    if len(observations) < 2:
        raise TooFewMatchesError("triangulation needs at least two views")

    rays = []
    for pose, uv in observations:
        d = pose.R @ np.array(
            [(uv[0] - cam.cx) / cam.fx, (uv[1] - cam.cy) / cam.fy, 1.0]
        )
        rays.append(d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            c = float(np.clip(rays[i] @ rays[j], -1.0, 1.0))
            max_angle = max(max_angle, math.degrees(math.acos(c)))
    if max_angle < min_angle_deg:
        raise InsufficientParallaxError(
            f"max triangulation angle {max_angle:.3f} deg < {min_angle_deg} deg"
        )

    A = np.empty((2 * len(observations), 4))
    for i, (pose, uv) in enumerate(observations):
        Rcw = pose.R.T
        tcw = -Rcw @ pose.t
        P = cam.matrix @ np.hstack([Rcw, tcw[:, None]])
        A[2 * i] = uv[0] * P[2] - P[0]
        A[2 * i + 1] = uv[1] * P[2] - P[1]
    _, _, vt = np.linalg.svd(A)
    X_h = vt[-1]
    if abs(X_h[3]) < 1e-12:
        raise InsufficientParallaxError("homogeneous solution at infinity")
    x = X_h[:3] / X_h[3]

    pose_index = {}
    obs = []
    for i, (pose, uv) in enumerate(observations):
        pose_index[i] = pose
        obs.append((i, np.asarray(uv, dtype=float)))
    x, _ = _refine_point(x, obs, pose_index, cam, max_iters=10)

    for pose, _uv in observations:
        depth = (pose.R.T @ (x - pose.t))[2]
        if depth <= 0.0:
            raise CheiralityError(f"triangulated point at depth {depth:.4g}")
    return x


def map_reprojection_errors(session_map: SessionMap, cam: CameraIntrinsics):
    """Per-observation pixel error for every point; list aligned with points."""
    pose_index = {f.frame_id: f.pose for f in session_map.frames}
    out = []
    for pt in session_map.points:
        errs = []
        for frame_id, uv in pt.observations:
            pose = pose_index[frame_id]
            uv_hat, depth = project_points(pose, cam, pt.position[None, :])
            if depth[0] <= 0:
                errs.append(float("inf"))
            else:
                errs.append(float(np.linalg.norm(uv_hat[0] - uv)))
        out.append(errs)
    return out


def refine_structure(session_map: SessionMap, cam: CameraIntrinsics) -> SessionMap:
    """Structure-only bundle adjustment: each point polished independently
    against the fixed frame poses. Poses are carried over untouched, and the
    total reprojection cost never increases (steps are rejected otherwise)."""
    pose_index = {f.frame_id: f.pose for f in session_map.frames}
    new_points = []
    for pt in session_map.points:
        if len(pt.observations) < 2:
            new_points.append(MapPoint(pt.point_id, pt.position.copy(), list(pt.observations)))
            continue
        x, _ = _refine_point(pt.position, pt.observations, pose_index, cam)
        new_points.append(MapPoint(pt.point_id, x, list(pt.observations)))
    return SessionMap(session_map.session_id, session_map.frames, new_points)


def build_session_map(
    session_id: int,
    frames,
    pairwise_matches,
    cam: CameraIntrinsics,
    epipolar_threshold: float = 4.0,
    min_angle_deg: float = 1.0,
    reproj_prune_px: float = 3.0,
) -> SessionMap:
    """Assemble a session map from posed frames and pairwise 2D-2D matches.

    Tracks are formed by chaining matches whose endpoint pixels coincide
    exactly (the writer emits one detection per frame/point, so coincidence
    is exact), triangulated, refined, and pruned against the reprojection
    threshold. Points need two surviving observations to be kept.
    """
    pose_index = {f.frame_id: f.pose for f in frames}

    parent = {}

    def find(key):
        root = key
        while parent[root] != root:
            root = parent[root]
        while parent[key] != root:
            parent[key], key = root, parent[key]
        return root

    def union(a, b):
        if a not in parent:
            parent[a] = a
        if b not in parent:
            parent[b] = b
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    kept_pairs = []
    for pair in pairwise_matches:
        pruned = prune_epipolar(
            pair, pose_index[pair.frame_a], pose_index[pair.frame_b], cam,
            threshold=epipolar_threshold,
        )
        kept_pairs.append(pruned)
        for i in range(len(pruned)):
            key_a = (pruned.frame_a, pruned.uv_a[i].tobytes())
            key_b = (pruned.frame_b, pruned.uv_b[i].tobytes())
            union(key_a, key_b)

    groups = {}
    for pair in kept_pairs:
        for i in range(len(pair)):
            for frame_id, uv in ((pair.frame_a, pair.uv_a[i]), (pair.frame_b, pair.uv_b[i])):
                root = find((frame_id, uv.tobytes()))
                groups.setdefault(root, {})[(frame_id, uv.tobytes())] = (frame_id, uv.copy())

    points = []
    next_id = 0
    for group in groups.values():
        obs_all = sorted(group.values(), key=lambda fu: fu[0])
        # a merged track can pick up two detections in one frame; keep one
        obs, seen = [], set()
        for frame_id, uv in obs_all:
            if frame_id not in seen:
                seen.add(frame_id)
                obs.append((frame_id, uv))
        if len(obs) < 2:
            continue
        try:
            x = triangulate(
                [(pose_index[f], uv) for f, uv in obs], cam, min_angle_deg=min_angle_deg
            )
        except (InsufficientParallaxError, CheiralityError, TooFewMatchesError):
            continue
        points.append(MapPoint(next_id, x, obs))
        next_id += 1

    session_map = refine_structure(SessionMap(session_id, list(frames), points), cam)

    final_points = []
    next_id = 0
    per_point = map_reprojection_errors(session_map, cam)
    for pt, errs in zip(session_map.points, per_point):
        obs = [o for o, e in zip(pt.observations, errs) if e <= reproj_prune_px]
        if len(obs) < 2:
            continue
        final_points.append(MapPoint(next_id, pt.position, obs))
        next_id += 1
    return SessionMap(session_id, session_map.frames, final_points)

"""Synthetic multi-session scenario generator.

Stands in for the learned localization front-end: produces a ground-truthed
query trajectory over a road-like path, per-session maps with controllable
error models (smooth drift, point noise, optional slowly-varying bias),
per-frame 2D-3D match bundles against each session, 2D-2D tracks between
query frames, drifting odometry, and per-session candidate poses with
labeled gross outliers.

All randomness flows through one 64-bit PCG generator seeded from the
config, drawn in a fixed order, so a given seed reproduces every artifact
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import PipelineConfig
from .geometry import Pose, compose, relative_pose, unproject
from .localize import Candidate
from .mapping import MapFrame, MapPoint, SessionMap
from .matches import Match2D3D, MatchSet2D2D

# how many frames before/after its spawn frame a point stays matchable
VISIBILITY_WINDOW = 3
# long tracks connect k to k+2 so a frame with no usable candidate can
# still be bridged by its neighbors
SKIP_GAP = 2
FRUSTUM_MARGIN_PX = 8.0


@dataclass
class Scenario:
    """Everything one simulated run hands to the downstream pipeline."""

    config: PipelineConfig
    true_poses: dict  # frame_id -> Pose
    arc_lengths: np.ndarray  # cumulative path length per frame (m)
    session_maps: list  # SessionMap per session
    bundles: dict  # frame_id -> session_id -> [Match2D3D]
    candidates: dict  # frame_id -> session_id -> Candidate
    tracks: list  # MatchSet2D2D, short-gap pairs then skip pairs
    odometry: list  # (frame_a, frame_b, measured relative Pose)
    labels: dict = field(default_factory=dict)


def _heading_matrix(heading: float) -> np.ndarray:
    """Camera axes for a forward-looking camera on a flat road: columns are
    right, down, forward in world coordinates (world up is +z)."""
    f = np.array([np.cos(heading), np.sin(heading), 0.0])
    r = np.array([np.sin(heading), -np.cos(heading), 0.0])
    d = np.array([0.0, 0.0, -1.0])
    return np.column_stack([r, d, f])


def _smooth_field(rng, total_len, knot_len, scale, walk=False):
    """Piecewise-linear R^3 field over arc length; `walk` accumulates the
    knots into a random walk (drift) instead of zero-mean wiggle (bias)."""
    n = max(int(np.ceil(total_len / max(knot_len, 1e-9))) + 2, 2)
    knots = np.linspace(0.0, max(total_len, 1e-9), n)
    vals = rng.normal(0.0, scale, size=(n, 3))
    vals[:, 2] *= 0.3  # errors are mostly planar; keep the vertical part small
    if walk:
        vals = np.cumsum(vals, axis=0)
        vals -= vals[0]

    def field_at(s):
        s = np.asarray(s, dtype=float)
        return np.stack([np.interp(s, knots, vals[:, i]) for i in range(3)], axis=-1)

    return field_at


def _trajectory(cfg: PipelineConfig, rng):
    """Road-like query path: heading random walk with soft steering back
    toward the scene center, smooth speed profile, occasional full stops."""
    K = cfg.sim_frames
    n_knots = max(K // 25 + 2, 2)
    curv_knots = rng.normal(0.0, 0.03, size=n_knots)  # rad per meter
    speed_knots = rng.uniform(0.6, 1.4, size=n_knots)
    xs = np.linspace(0.0, K - 1.0, n_knots)
    curvature = np.interp(np.arange(K), xs, curv_knots)
    speed = cfg.sim_speed_mps * np.interp(np.arange(K), xs, speed_knots)

    stop_draws = rng.random(K)
    k = 0
    while k < K:
        if stop_draws[k] < cfg.sim_stop_rate:
            speed[k : k + cfg.sim_stop_frames] = 0.0
            k += cfg.sim_stop_frames
        k += 1

    heading = rng.uniform(0.0, 2.0 * np.pi)
    pos = np.zeros(3)
    poses = {}
    arcs = np.zeros(K)
    for k in range(K):
        poses[k] = Pose.from_rt(_heading_matrix(heading), pos + np.array([0.0, 0.0, 1.6]))
        step = speed[k]
        if k + 1 < K:
            arcs[k + 1] = arcs[k] + step
        if step > 0.0:
            # steer back toward the center when drifting past the extent
            d = np.hypot(pos[0], pos[1])
            if d > 0.5 * cfg.sim_extent_m:
                back = np.arctan2(-pos[1], -pos[0])
                turn = np.arctan2(np.sin(back - heading), np.cos(back - heading))
                heading += np.clip(turn, -0.04 * step, 0.04 * step)
            heading += curvature[k] * step
            pos = pos + step * np.array([np.cos(heading), np.sin(heading), 0.0])
    return poses, arcs


def generate(cfg: PipelineConfig) -> Scenario:
    """Build one deterministic scenario from the sim_* knobs in cfg.

    With every noise amplitude and rate at zero the output is exactly
    self-consistent: detections reproject with zero error, session maps and
    candidates equal the true structure and poses, and odometry equals the
    true relative motion.
    """
    cfg.validate()
    cam = cfg.camera()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    K, C = cfg.sim_frames, cfg.sim_sessions

    true_poses, arcs = _trajectory(cfg, rng)
    total_len = float(arcs[-1])

    # --- world points, one batch per spawn frame --------------------------
    ppf = cfg.sim_points_per_frame
    pix_lo = FRUSTUM_MARGIN_PX + 2.0
    spawn_frame = np.repeat(np.arange(K), ppf)
    world_pts = np.empty((K * ppf, 3))
    for k in range(K):
        pix = rng.uniform(
            [pix_lo, pix_lo],
            [cam.width - pix_lo, cam.height - pix_lo],
            size=(ppf, 2),
        )
        depth = rng.uniform(cfg.sim_depth_min_m, cfg.sim_depth_max_m, ppf)
        ray = np.column_stack(
            [(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy, np.ones(ppf)]
        )
        world_pts[k * ppf : (k + 1) * ppf] = (
            depth[:, None] * ray
        ) @ true_poses[k].R.T + true_poses[k].t
    n_pts = K * ppf

    # --- per-session map error models ------------------------------------
    biased = []
    if cfg.sim_session_bias_m > 0.0:
        biased = [1 if C >= 2 else 0]
    drift_fields = [
        _smooth_field(rng, total_len, cfg.sim_map_drift_len_m, cfg.sim_map_drift_m, walk=True)
        for _ in range(C)
    ]
    bias_fields = [
        _smooth_field(rng, total_len, cfg.sim_bias_len_m, cfg.sim_session_bias_m)
        if c in biased
        else None
        for c in range(C)
    ]

    def session_shift(c, s):
        shift = drift_fields[c](s)
        if bias_fields[c] is not None:
            shift = shift + bias_fields[c](s)
        return shift

    spawn_arcs = arcs[spawn_frame]
    session_pts = np.empty((C, n_pts, 3))
    frame_shift = np.empty((C, K, 3))
    for c in range(C):
        noise = rng.normal(0.0, cfg.sim_map_noise_m, size=(n_pts, 3))
        session_pts[c] = world_pts + session_shift(c, spawn_arcs) + noise
        frame_shift[c] = session_shift(c, arcs)

    # --- cached detections: one noisy pixel per visible (frame, point) ----
    detections = {}  # (frame, point) -> (uv (2,), camera depth)
    visible = []  # per frame: list of point ids with a detection
    for k in range(K):
        lo = (k - VISIBILITY_WINDOW) * ppf
        hi = (k + VISIBILITY_WINDOW + 1) * ppf
        ids = np.arange(max(lo, 0), min(hi, n_pts))
        p_cam = (world_pts[ids] - true_poses[k].t) @ true_poses[k].R
        keep = p_cam[:, 2] > 1.0
        ids, p_cam = ids[keep], p_cam[keep]
        uv = np.column_stack(
            [
                cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx,
                cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy,
            ]
        )
        keep = (
            (uv[:, 0] >= FRUSTUM_MARGIN_PX)
            & (uv[:, 0] < cam.width - FRUSTUM_MARGIN_PX)
            & (uv[:, 1] >= FRUSTUM_MARGIN_PX)
            & (uv[:, 1] < cam.height - FRUSTUM_MARGIN_PX)
        )
        ids, p_cam, uv = ids[keep], p_cam[keep], uv[keep]
        if cfg.sim_pixel_noise_px > 0.0:
            uv = uv + rng.normal(0.0, cfg.sim_pixel_noise_px, size=uv.shape)
        for j, i in enumerate(ids):
            detections[(k, int(i))] = (uv[j], float(p_cam[j, 2]))
        visible.append([int(i) for i in ids])

    # --- session maps (synthetic but internally consistent) ---------------
    session_maps = []
    for c in range(C):
        frames = [
            MapFrame(k, float(k), Pose(true_poses[k].q, true_poses[k].t + frame_shift[c, k]))
            for k in range(K)
        ]
        points = []
        for i in range(n_pts):
            k0 = int(spawn_frame[i])
            obs_frames = [k0, k0 + 1] if k0 + 1 < K else [k0 - 1, k0]
            obs = []
            for kf in obs_frames:
                p_cam = frames[kf].pose.R.T @ (session_pts[c, i] - frames[kf].pose.t)
                if p_cam[2] <= 0.1:
                    continue
                obs.append(
                    (
                        kf,
                        np.array(
                            [
                                cam.fx * p_cam[0] / p_cam[2] + cam.cx,
                                cam.fy * p_cam[1] / p_cam[2] + cam.cy,
                            ]
                        ),
                    )
                )
            if len(obs) >= 2:
                points.append(MapPoint(i, session_pts[c, i].copy(), obs))
        session_maps.append(SessionMap(c, frames, points))

    # --- 2D-3D bundles and candidate poses --------------------------------
    bundles = {}
    candidates = {}
    labels_failed = []
    labels_outlier_cand = []
    labels_outlier_m = {}
    sigma_r = np.radians(cfg.sim_prior_noise_deg)
    for k in range(K):
        bundles[k] = {}
        candidates[k] = {}
        for c in range(C):
            fail_draw = rng.random()
            count_draw = (
                rng.lognormal(0.0, cfg.sim_count_jitter) if cfg.sim_count_jitter > 0 else 1.0
            )
            gross_draw = rng.random()
            gross_count = int(rng.integers(6, 10))
            if fail_draw < cfg.sim_session_failure_rate or not visible[k]:
                labels_failed.append([k, c])
                continue
            n_vis = len(visible[k])
            is_gross = gross_draw < cfg.sim_gross_outlier_rate
            # a wrong-place retrieval verifies far fewer matches than a true
            # localization, so gross bundles sit near the acceptance floor
            if is_gross:
                n_want = min(gross_count, n_vis)
            else:
                n_want = int(np.clip(round(cfg.sim_matches_per_session * count_draw), 6, n_vis))
            pids = [visible[k][j] for j in np.sort(rng.choice(n_vis, size=n_want, replace=False))]

            # candidate pose: the session's own (drifted/biased) estimate
            # plus small noise, or a gross outlier displaced sideways whose
            # bundle is replaced by a phantom consistent with the wrong pose
            d_t = rng.normal(0.0, cfg.sim_prior_noise_m, size=3)
            d_r = rng.normal(0.0, sigma_r / np.sqrt(3.0), size=3)
            outlier_dir = rng.normal(size=3)
            if is_gross:
                outlier_dir[2] *= 0.2
                outlier_dir *= cfg.sim_gross_outlier_m / np.linalg.norm(outlier_dir)
                base = Pose(true_poses[k].q, true_poses[k].t + outlier_dir)
                labels_outlier_cand.append([k, c])
            else:
                base = Pose(true_poses[k].q, true_poses[k].t + frame_shift[c, k])
            cand_pose = Pose(compose(base, Pose.from_rotvec(d_r, np.zeros(3))).q, base.t + d_t)

            out_draws = rng.random(n_want)
            swap_draws = rng.integers(0, max(n_vis - 1, 1), size=n_want)
            matches = []
            out_idx = []
            for j, pid in enumerate(pids):
                uv, depth = detections[(k, pid)]
                if is_gross:
                    world = unproject(base, cam, uv, depth)
                elif out_draws[j] < cfg.sim_outlier_2d3d_rate and n_vis > 1:
                    # wrong data association: pixel matched to another point
                    other = visible[k][int(swap_draws[j])]
                    if other == pid:
                        other = visible[k][(int(swap_draws[j]) + 1) % n_vis]
                    world = session_pts[c, other]
                    out_idx.append(j)
                else:
                    world = session_pts[c, pid]
                matches.append(Match2D3D(uv.copy(), world, source="SIM", session_id=c))
            bundles[k][c] = matches
            candidates[k][c] = Candidate(k, c, cand_pose, matches)
            if out_idx:
                labels_outlier_m[f"{k}:{c}"] = out_idx

    # --- 2D-2D tracks ------------------------------------------------------
    tracks = []
    labels_outlier_t = {}
    for gap in sorted({max(cfg.sim_track_stride, 1), SKIP_GAP}):
        for k in range(K - gap):
            a, b = k, k + gap
            shared = [i for i in visible[a] if (b, i) in detections]
            if not shared:
                tracks.append(MatchSet2D2D(a, b, np.zeros((0, 2)), np.zeros((0, 2))))
                continue
            uv_a = np.array([detections[(a, i)][0] for i in shared])
            uv_b = np.array([detections[(b, i)][0] for i in shared])
            out_mask = rng.random(len(shared)) < cfg.sim_outlier_2d2d_rate
            if out_mask.any():
                uv_b = uv_b.copy()
                uv_b[out_mask] = rng.uniform(
                    [0.0, 0.0], [cam.width, cam.height], size=(int(out_mask.sum()), 2)
                )
                labels_outlier_t[f"{a}:{b}"] = np.flatnonzero(out_mask).tolist()
            tracks.append(MatchSet2D2D(a, b, uv_a, uv_b))

    # --- odometry ----------------------------------------------------------
    odometry = []
    for k in range(K - 1):
        true_rel = relative_pose(true_poses[k], true_poses[k + 1])
        step = max(float(np.linalg.norm(true_rel.t)), 1e-9)
        noise_t = rng.normal(0.0, cfg.sim_drift_trans_per_m * step, size=3)
        noise_r = rng.normal(0.0, cfg.sim_drift_rot_per_m * step / np.sqrt(3.0), size=3)
        meas = Pose(
            compose(true_rel, Pose.from_rotvec(noise_r, np.zeros(3))).q, true_rel.t + noise_t
        )
        odometry.append((k, k + 1, meas))

    labels = {
        "seed": int(cfg.seed),
        "biased_sessions": biased,
        "failed": labels_failed,
        "outlier_candidates": labels_outlier_cand,
        "outlier_matches_2d3d": labels_outlier_m,
        "outlier_tracks": labels_outlier_t,
    }
    return Scenario(
        cfg, true_poses, arcs, session_maps, bundles, candidates, tracks, odometry, labels
    )


def scenario_incompatible_sessions(cfg: PipelineConfig, bias_m: float = 0.5) -> Scenario:
    """Default scenario with one session biased by a slowly-varying field.

    The biased session stays individually consistent frame by frame (its
    matches agree with a nearby shifted pose) while disagreeing with the
    other sessions and with its own data a few dozen meters away, which is
    what breaks naive match merging but not chain consensus."""
    return generate(replace(cfg, sim_session_bias_m=bias_m))

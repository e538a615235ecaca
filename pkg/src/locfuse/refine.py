"""EM-weighted pose refinement over a frame chain.

Each frame k may carry a global prior pose P_k with a 2D-3D match set F_k;
consecutive (and optionally skip) frame pairs carry a measured relative
pose and a 2D-2D track set. A per-frame weight w_k in (0, 1] mediates how
much the prior and its matches are trusted; the total objective is

    sum_k w_k * (|r_prior|^2 + lambda1 * pi_k)            (unary data)
  + U^2 * sum_k (w_k - ln w_k)                            (weight regularizer)
  + sum_pairs (|r_rel|^2 + lambda2 * sampson_pair)        (pairwise)

minimized by alternating a closed-form weight update (E-step) with a damped
least-squares pose update (M-step). Pose increments use the local
parameterization xi = (dt, dtheta) with t <- t + dt and R <- exp(dtheta) R;
`apply_delta` realizes it and every analytic Jacobian below is taken with
respect to it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .errors import (
    DegenerateBaselineError,
    EmptyMatchSetError,
    NoSeedsError,
    SolverDivergedError,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    fundamental_from_poses,
    hat,
    inverse,
    relative_pose,
    sampson_errors,
    so3_exp,
    so3_left_jacobian_inverse,
    so3_log,
)
from .matches import MatchSet2D2D, match_arrays

VARIANTS = ("pgba", "pgo", "pgo_2d2d", "pgo_2d3d")

# Saturation guards for the match channels. A match viewed from a wildly
# wrong pose (or from behind the camera, where the projection depth clamp
# takes over) can otherwise contribute an unbounded robust cost and an
# arbitrarily large gradient, letting a single absurd row dominate the whole
# chain. Past these caps a row's cost freezes and its gradient vanishes;
# both sit orders of magnitude beyond anything a live term produces.
REPROJ_ERR_CAP_PX = 1e4
SAMPSON_ERR_CAP_SQPX = 1e8


# ---------------------------------------------------------------------------
# problem description


@dataclass
class PriorTerm:
    """Global prior for one frame: a pose plus the 2D-3D matches behind it."""

    pose: Pose
    matches: list = field(default_factory=list)


@dataclass
class RelativeTerm:
    """Measured relative pose between two frames, optionally with tracks."""

    frame_a: int
    frame_b: int
    z: Pose
    tracks: object = None  # MatchSet2D2D or None


@dataclass
class RefinementProblem:
    frames: list  # ordered frame ids
    priors: dict  # frame_id -> PriorTerm
    relatives: list  # RelativeTerm, consecutive pairs first, then skips
    cam: CameraIntrinsics
    lambda_reproj: float = 1e-2
    lambda_sampson: float = 1e-2
    robust_weight_scale: float = 0.5  # U
    rotation_weight: float = 1.0  # rho: radians-to-meters exchange rate
    huber_reproj_px: float = 3.0
    huber_sampson_sqpx: float = 4.0

    def validate(self) -> "RefinementProblem":
        if not self.frames:
            raise ValueError("problem has no frames")
        known = set(self.frames)
        for f in self.priors:
            if f not in known:
                raise ValueError(f"prior references unknown frame {f}")
        for rel in self.relatives:
            if rel.frame_a not in known or rel.frame_b not in known:
                raise ValueError(f"relative term references unknown frame "
                                 f"({rel.frame_a}, {rel.frame_b})")
        for name in ("lambda_reproj", "lambda_sampson", "robust_weight_scale",
                     "rotation_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self


@dataclass
class RefinementState:
    poses: dict  # frame_id -> Pose
    weights: dict  # frame_id -> w in (0, 1], prior frames only
    iteration: int = 0


def apply_delta(pose: Pose, xi: np.ndarray) -> Pose:
    """Local update: translation shifted, rotation left-multiplied."""
    xi = np.asarray(xi, dtype=float)
    return Pose.from_rt(so3_exp(xi[3:]) @ pose.R, pose.t + xi[:3])


# ---------------------------------------------------------------------------
# residuals and their analytic Jacobians (scalar, one term at a time)


def residual_pose_prior(x: Pose, p: Pose, rotation_weight: float = 1.0) -> np.ndarray:
    """6-vector pose error: translation difference stacked on the scaled
    rotation log of the relative orientation."""
    return np.concatenate(
        [x.t - p.t, rotation_weight * so3_log(x.R @ p.R.T)]
    )


def jac_pose_prior(x: Pose, p: Pose, rotation_weight: float = 1.0) -> np.ndarray:
    """(6, 6) derivative of residual_pose_prior with respect to xi on x."""
    phi = so3_log(x.R @ p.R.T)
    J = np.zeros((6, 6))
    J[:3, :3] = np.eye(3)
    J[3:, 3:] = rotation_weight * so3_left_jacobian_inverse(phi)
    return J


def residual_relative(x_a: Pose, x_b: Pose, z: Pose,
                      rotation_weight: float = 1.0) -> np.ndarray:
    """Pose error between the modeled relative pose a->b and the measured z."""
    rel = relative_pose(x_a, x_b)
    return np.concatenate(
        [rel.t - z.t, rotation_weight * so3_log(rel.R @ z.R.T)]
    )


def jac_relative(x_a: Pose, x_b: Pose, z: Pose, rotation_weight: float = 1.0):
    """(6, 6) derivative blocks of residual_relative wrt xi on a and on b."""
    rel = relative_pose(x_a, x_b)
    phi = so3_log(rel.R @ z.R.T)
    Jl = so3_left_jacobian_inverse(phi)
    Rat = x_a.R.T
    Ja = np.zeros((6, 6))
    Jb = np.zeros((6, 6))
    Ja[:3, :3] = -Rat
    Ja[:3, 3:] = Rat @ hat(x_b.t - x_a.t)
    Ja[3:, 3:] = -rotation_weight * (Jl @ Rat)
    Jb[:3, :3] = Rat
    Jb[3:, 3:] = rotation_weight * (Jl @ Rat)
    return Ja, Jb


def _reproj_terms(x: Pose, uv, xyz, cam):
    """Per-match pixel residual, error norm, and (2, 6) pose Jacobians."""
    p = (xyz - x.t) @ x.R  # camera-frame coordinates, rows
    z = np.maximum(p[:, 2], 1e-6)
    res = np.empty_like(uv)
    res[:, 0] = cam.fx * p[:, 0] / z + cam.cx - uv[:, 0]
    res[:, 1] = cam.fy * p[:, 1] / z + cam.cy - uv[:, 1]
    e = np.linalg.norm(res, axis=1)
    A = np.zeros((len(uv), 2, 3))
    A[:, 0, 0] = cam.fx / z
    A[:, 0, 2] = -cam.fx * p[:, 0] / (z * z)
    A[:, 1, 1] = cam.fy / z
    A[:, 1, 2] = -cam.fy * p[:, 1] / (z * z)
    J = np.empty((len(uv), 2, 6))
    J[:, :, :3] = -np.einsum("mij,kj->mik", A, x.R)
    diff = xyz - x.t
    H = np.zeros((len(uv), 3, 3))
    H[:, 0, 1] = -diff[:, 2]
    H[:, 0, 2] = diff[:, 1]
    H[:, 1, 0] = diff[:, 2]
    H[:, 1, 2] = -diff[:, 0]
    H[:, 2, 0] = -diff[:, 1]
    H[:, 2, 1] = diff[:, 0]
    J[:, :, 3:] = np.einsum("mik,mkl->mil", -J[:, :, :3], H)
    return res, e, J


def _huber(e, delta):
    """Huber cost on an error norm: quadratic inside delta, linear outside."""
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)


def residual_reprojection(x: Pose, matches, cam: CameraIntrinsics,
                          huber_px: float = 3.0) -> float:
    """Mean robustified squared reprojection error of a frame's matches."""
    if not len(matches):
        raise EmptyMatchSetError("reprojection residual needs at least one match")
    uv, xyz = match_arrays(matches)
    _, e, _ = _reproj_terms(x, uv, xyz, cam)
    return float(np.mean(_huber(np.minimum(e, REPROJ_ERR_CAP_PX), huber_px)))


def grad_reprojection(x: Pose, matches, cam: CameraIntrinsics,
                      huber_px: float = 3.0) -> np.ndarray:
    """(6,) gradient of residual_reprojection wrt xi on x."""
    if not len(matches):
        raise EmptyMatchSetError("reprojection gradient needs at least one match")
    uv, xyz = match_arrays(matches)
    res, e, J = _reproj_terms(x, uv, xyz, cam)
    # d huber(e)/d e divided by e: 2 in the quadratic region, 2*delta/e outside
    scale = np.where(e <= huber_px, 2.0, 2.0 * huber_px / np.maximum(e, 1e-12))
    scale = scale * (e <= REPROJ_ERR_CAP_PX)
    g = np.einsum("m,mi,mij->j", scale, res, J)
    return g / len(matches)


def _sampson_pair_values(x_a, x_b, track, cam):
    F = fundamental_from_poses(x_a, x_b, cam, cam)
    return F, sampson_errors(F, track.uv_a, track.uv_b)


def _huber_sq(s, delta):
    """Huber on an already-squared error: s below delta, 2*sqrt(delta*s)-delta
    above (linear in the unsquared error)."""
    s = np.asarray(s, dtype=float)
    return np.where(s <= delta, s, 2.0 * np.sqrt(delta * np.maximum(s, 0.0)) - delta)


def residual_sampson_pair(x_a: Pose, x_b: Pose, track, cam: CameraIntrinsics,
                          huber_sqpx: float = 4.0) -> float:
    """Mean robustified Sampson error of the pair's tracks; a pair with no
    epipolar geometry (near-zero baseline) contributes zero."""
    if not len(track):
        raise EmptyMatchSetError("sampson residual needs at least one track")
    try:
        _, s = _sampson_pair_values(x_a, x_b, track, cam)
    except DegenerateBaselineError:
        return 0.0
    return float(np.mean(_huber_sq(np.minimum(s, SAMPSON_ERR_CAP_SQPX), huber_sqpx)))


def _sampson_axis_matrices(x_a, x_b, cam):
    """d F / d xi for all 12 axes (6 of pose a, then 6 of pose b)."""
    Ra, Rb = x_a.R, x_b.R
    Rbt = Rb.T
    R_ba = Rbt @ Ra
    t_ba = Rbt @ (x_a.t - x_b.t)
    Kit = cam.matrix_inv.T
    Ki = cam.matrix_inv
    axes = np.eye(3)
    D = np.empty((12, 3, 3))
    for j in range(3):
        dE = hat(Rbt @ axes[j]) @ R_ba  # d t_ba = Rb^T e_j
        D[j] = Kit @ dE @ Ki
    for j in range(3):
        dE = hat(t_ba) @ Rbt @ hat(axes[j]) @ Ra  # rotation of a
        D[3 + j] = Kit @ dE @ Ki
    for j in range(3):
        dE = hat(Rbt @ -axes[j]) @ R_ba  # d t_ba = -Rb^T e_j
        D[6 + j] = Kit @ dE @ Ki
    for j in range(3):
        dt = -Rbt @ hat(axes[j]) @ (x_a.t - x_b.t)
        dR = -Rbt @ hat(axes[j]) @ Ra
        dE = hat(dt) @ R_ba + hat(t_ba) @ dR
        D[9 + j] = Kit @ dE @ Ki
    return D


def _sampson_dF(F, uv_a, uv_b):
    """Per-track (3, 3) derivative of the Sampson error wrt the entries of F."""
    m = len(uv_a)
    xa = np.hstack([uv_a, np.ones((m, 1))])
    xb = np.hstack([uv_b, np.ones((m, 1))])
    Fa = xa @ F.T
    Ftb = xb @ F
    num = np.einsum("mi,mi->m", xb, Fa)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    den = np.maximum(den, 1e-15)
    # sigma = num^2 / den
    dnum = np.einsum("mi,mj->mij", xb, xa)
    P2a = Fa.copy()
    P2a[:, 2] = 0.0
    P2b = Ftb.copy()
    P2b[:, 2] = 0.0
    dden = 2.0 * np.einsum("mi,mj->mij", P2a, xa) + 2.0 * np.einsum("mi,mj->mij", xb, P2b)
    s = num * num / den
    dS = (2.0 * num / den)[:, None, None] * dnum - (s / den)[:, None, None] * dden
    return s, dS


def grad_sampson_pair(x_a: Pose, x_b: Pose, track, cam: CameraIntrinsics,
                      huber_sqpx: float = 4.0):
    """(6,) gradients of residual_sampson_pair wrt xi on a and on b."""
    if not len(track):
        raise EmptyMatchSetError("sampson gradient needs at least one track")
    try:
        F = fundamental_from_poses(x_a, x_b, cam, cam)
    except DegenerateBaselineError:
        return np.zeros(6), np.zeros(6)
    s, dS = _sampson_dF(F, track.uv_a, track.uv_b)
    # d huber_sq(s)/d s: 1 inside, sqrt(delta/s) outside
    hp = np.where(s <= huber_sqpx, 1.0,
                  np.sqrt(huber_sqpx / np.maximum(s, 1e-15)))
    hp = hp * (s <= SAMPSON_ERR_CAP_SQPX)
    D = _sampson_axis_matrices(x_a, x_b, cam)
    per_axis = np.einsum("mij,aij->ma", dS, D)
    g = (hp[:, None] * per_axis).sum(axis=0) / len(track)
    return g[:6], g[6:]


# ---------------------------------------------------------------------------
# batched SO(3) helpers for the solver workspace


def _hat_stack(v):
    B = len(v)
    K = np.zeros((B, 3, 3))
    K[:, 0, 1] = -v[:, 2]
    K[:, 0, 2] = v[:, 1]
    K[:, 1, 0] = v[:, 2]
    K[:, 1, 2] = -v[:, 0]
    K[:, 2, 0] = -v[:, 1]
    K[:, 2, 1] = v[:, 0]
    return K


def _exp_stack(rv):
    theta = np.linalg.norm(rv, axis=1)
    B = len(rv)
    K = _hat_stack(rv)
    a = np.ones(B)
    b = np.full(B, 0.5)
    big = theta >= 1e-8
    ts = theta[big]
    a[big] = np.sin(ts) / ts
    b[big] = (1.0 - np.cos(ts)) / (ts * ts)
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * (K @ K)


def _quat_stack(R):
    """Scalar-last quaternions for a (B, 3, 3) rotation stack (Shepperd)."""
    B = len(R)
    q = np.empty((B, 4))
    m00, m01, m02 = R[:, 0, 0], R[:, 0, 1], R[:, 0, 2]
    m10, m11, m12 = R[:, 1, 0], R[:, 1, 1], R[:, 1, 2]
    m20, m21, m22 = R[:, 2, 0], R[:, 2, 1], R[:, 2, 2]
    tr = m00 + m11 + m22
    c0 = tr > 0.0
    c1 = ~c0 & (m00 > m11) & (m00 > m22)
    c2 = ~c0 & ~c1 & (m11 > m22)
    c3 = ~(c0 | c1 | c2)
    s = np.sqrt(np.maximum(tr[c0] + 1.0, 0.0)) * 2.0
    q[c0, 3] = 0.25 * s
    q[c0, 0] = (m21[c0] - m12[c0]) / s
    q[c0, 1] = (m02[c0] - m20[c0]) / s
    q[c0, 2] = (m10[c0] - m01[c0]) / s
    s = np.sqrt(np.maximum(1.0 + m00[c1] - m11[c1] - m22[c1], 0.0)) * 2.0
    q[c1, 3] = (m21[c1] - m12[c1]) / s
    q[c1, 0] = 0.25 * s
    q[c1, 1] = (m01[c1] + m10[c1]) / s
    q[c1, 2] = (m02[c1] + m20[c1]) / s
    s = np.sqrt(np.maximum(1.0 + m11[c2] - m00[c2] - m22[c2], 0.0)) * 2.0
    q[c2, 3] = (m02[c2] - m20[c2]) / s
    q[c2, 0] = (m01[c2] + m10[c2]) / s
    q[c2, 1] = 0.25 * s
    q[c2, 2] = (m12[c2] + m21[c2]) / s
    s = np.sqrt(np.maximum(1.0 + m22[c3] - m00[c3] - m11[c3], 0.0)) * 2.0
    q[c3, 3] = (m10[c3] - m01[c3]) / s
    q[c3, 0] = (m02[c3] + m20[c3]) / s
    q[c3, 1] = (m12[c3] + m21[c3]) / s
    q[c3, 2] = 0.25 * s
    flip = q[:, 3] < 0.0
    q[flip] *= -1.0
    return q


def _log_stack(R):
    q = _quat_stack(R)
    s = np.linalg.norm(q[:, :3], axis=1)
    w = q[:, 3]
    out = np.empty((len(R), 3))
    tiny = s < 1e-10
    out[tiny] = 2.0 * q[tiny, :3] / w[tiny, None]
    big = ~tiny
    theta = 2.0 * np.arctan2(s[big], w[big])
    out[big] = (theta / s[big])[:, None] * q[big, :3]
    return out


def _jl_inv_stack(rv):
    theta = np.linalg.norm(rv, axis=1)
    B = len(rv)
    K = _hat_stack(rv)
    c = np.full(B, 1.0 / 12.0)
    big = theta >= 1e-6
    ts = theta[big]
    c[big] = 1.0 / (ts * ts) - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts))
    return np.eye(3)[None] - 0.5 * K + c[:, None, None] * (K @ K)


# ---------------------------------------------------------------------------
# solver workspace: stacked arrays plus a fixed sparse pattern


class _Workspace:
    def __init__(self, problem: RefinementProblem, use_reproj: bool, use_sampson: bool):
        self.problem = problem
        self.use_reproj = use_reproj
        self.use_sampson = use_sampson
        self.cam = problem.cam
        self.index = {f: i for i, f in enumerate(problem.frames)}
        self.K = len(problem.frames)

        self.prior_idx = np.array(
            [self.index[f] for f in problem.frames if f in problem.priors], dtype=int
        )
        self.prior_frames = [f for f in problem.frames if f in problem.priors]
        self.P_R = np.array([problem.priors[f].pose.R for f in self.prior_frames])
        self.P_t = np.array([problem.priors[f].pose.t for f in self.prior_frames])

        # reprojection rows, grouped by prior frame in frame order
        rows_f, rows_uv, rows_xyz, seg = [], [], [], [0]
        self.reproj_prior_pos = []  # position in the prior arrays, per segment
        for pos, f in enumerate(self.prior_frames):
            ms = problem.priors[f].matches
            if not ms:
                continue
            uv, xyz = match_arrays(ms)
            rows_f.append(np.full(len(ms), self.index[f]))
            rows_uv.append(uv)
            rows_xyz.append(xyz)
            seg.append(seg[-1] + len(ms))
            self.reproj_prior_pos.append(pos)
        self.m_frame = np.concatenate(rows_f) if rows_f else np.zeros(0, dtype=int)
        self.m_uv = np.vstack(rows_uv) if rows_uv else np.zeros((0, 2))
        self.m_xyz = np.vstack(rows_xyz) if rows_xyz else np.zeros((0, 3))
        self.m_seg = np.array(seg[:-1], dtype=int)
        self.m_counts = np.array(
            [seg[i + 1] - seg[i] for i in range(len(seg) - 1)], dtype=int
        )
        self.reproj_prior_pos = np.array(self.reproj_prior_pos, dtype=int)

        self.rel_a = np.array([self.index[r.frame_a] for r in problem.relatives], dtype=int)
        self.rel_b = np.array([self.index[r.frame_b] for r in problem.relatives], dtype=int)
        self.Z_R = np.array([r.z.R for r in problem.relatives]).reshape(-1, 3, 3)
        self.Z_t = np.array([r.z.t for r in problem.relatives]).reshape(-1, 3)

        # sampson rows, stacked flat across pairs for batched evaluation
        sp_a, sp_b, sp_uva, sp_uvb, sp_seg = [], [], [], [], [0]
        if use_sampson:
            for r in problem.relatives:
                if r.tracks is not None and len(r.tracks):
                    sp_a.append(self.index[r.frame_a])
                    sp_b.append(self.index[r.frame_b])
                    sp_uva.append(np.asarray(r.tracks.uv_a, dtype=float))
                    sp_uvb.append(np.asarray(r.tracks.uv_b, dtype=float))
                    sp_seg.append(sp_seg[-1] + len(r.tracks))
        self.s_pa = np.array(sp_a, dtype=int)
        self.s_pb = np.array(sp_b, dtype=int)
        self.s_uva = np.vstack(sp_uva) if sp_uva else np.zeros((0, 2))
        self.s_uvb = np.vstack(sp_uvb) if sp_uvb else np.zeros((0, 2))
        self.s_seg = np.array(sp_seg[:-1], dtype=int)
        self.s_counts = np.array(
            [sp_seg[i + 1] - sp_seg[i] for i in range(len(sp_seg) - 1)], dtype=int
        )
        self.s_row_pair = np.repeat(np.arange(len(self.s_pa)), self.s_counts)
        ones = np.ones((len(self.s_uva), 1))
        self.s_xa = np.hstack([self.s_uva, ones])
        self.s_xb = np.hstack([self.s_uvb, ones])
        self.samp = [
            (int(a), int(b)) for a, b in zip(self.s_pa, self.s_pb)
        ]

        # sparse pattern: one 6x6 diagonal block per frame, four blocks per
        # coupled pair (relative terms and sampson pairs share pairs)
        pairs = {(int(a), int(b)) for a, b in zip(self.rel_a, self.rel_b)}
        pairs |= set(self.samp)
        self.pair_list = sorted(pairs)
        self.pair_slot = {p: i for i, p in enumerate(self.pair_list)}
        n_blocks = self.K + 4 * len(self.pair_list)
        rr = np.empty((n_blocks, 6, 6), dtype=int)
        cc = np.empty((n_blocks, 6, 6), dtype=int)
        base = np.arange(6)
        for i in range(self.K):
            rr[i] = (6 * i + base)[:, None]
            cc[i] = (6 * i + base)[None, :]
        for s, (a, b) in enumerate(self.pair_list):
            for which, (r0, c0) in enumerate(((a, a), (a, b), (b, a), (b, b))):
                blk = self.K + 4 * s + which
                rr[blk] = (6 * r0 + base)[:, None]
                cc[blk] = (6 * c0 + base)[None, :]
        n = 6 * self.K
        diag_idx = np.arange(n)
        self._rows = np.concatenate([rr.ravel(), diag_idx])
        self._cols = np.concatenate([cc.ravel(), diag_idx])
        self._n_blocks = n_blocks
        self._pair_a = np.array([a for a, _ in self.pair_list], dtype=int)
        self._pair_b = np.array([b for _, b in self.pair_list], dtype=int)
        self._rel_blk = self.K + 4 * np.array(
            [self.pair_slot[(int(a), int(b))] for a, b in zip(self.rel_a, self.rel_b)],
            dtype=int,
        )
        self._s_blk = self.K + 4 * np.array(
            [self.pair_slot[p] for p in self.samp], dtype=int
        )
        self._reproj_fidx = (
            self.prior_idx[self.reproj_prior_pos]
            if len(self.reproj_prior_pos) else np.zeros(0, dtype=int)
        )

    # -- state packing ----------------------------------------------------

    def pack(self, poses: dict):
        R = np.array([poses[f].R for f in self.problem.frames])
        t = np.array([poses[f].t for f in self.problem.frames])
        return R, t

    def unpack(self, R, t):
        return {
            f: Pose.from_rt(R[i], t[i]) for f, i in self.index.items()
        }

    # -- objective pieces --------------------------------------------------

    def data_terms(self, R, t):
        """Per-prior-frame unary data term d_k = |r_prior|^2 + l1 * pi_k."""
        pr = self.problem
        d = np.zeros(len(self.prior_frames))
        if len(self.prior_frames):
            rt = t[self.prior_idx] - self.P_t
            rot = _log_stack(R[self.prior_idx] @ np.transpose(self.P_R, (0, 2, 1)))
            d += np.einsum("ki,ki->k", rt, rt)
            d += pr.rotation_weight ** 2 * np.einsum("ki,ki->k", rot, rot)
        if self.use_reproj and len(self.m_frame):
            h = self._reproj_huber(R, t)
            pi = np.add.reduceat(h, self.m_seg) / self.m_counts
            d[self.reproj_prior_pos] += pr.lambda_reproj * pi
        return d

    def _reproj_huber(self, R, t):
        cam = self.cam
        Rf = R[self.m_frame]
        p = np.einsum("mji,mj->mi", Rf, self.m_xyz - t[self.m_frame])
        z = np.maximum(p[:, 2], 1e-6)
        du = cam.fx * p[:, 0] / z + cam.cx - self.m_uv[:, 0]
        dv = cam.fy * p[:, 1] / z + cam.cy - self.m_uv[:, 1]
        e = np.minimum(np.hypot(du, dv), REPROJ_ERR_CAP_PX)
        return _huber(e, self.problem.huber_reproj_px)

    def pair_costs(self, R, t):
        """(relative term total, sampson term total) at the given state."""
        pr = self.problem
        rel = 0.0
        if len(self.rel_a):
            Ra = R[self.rel_a]
            rt = np.einsum("pji,pj->pi", Ra, t[self.rel_b] - t[self.rel_a]) - self.Z_t
            rel_R = np.einsum("pji,pjk->pik", Ra, R[self.rel_b])
            rot = _log_stack(rel_R @ np.transpose(self.Z_R, (0, 2, 1)))
            rel = float(np.einsum("pi,pi->", rt, rt)
                        + pr.rotation_weight ** 2 * np.einsum("pi,pi->", rot, rot))
        samp = 0.0
        if self.use_sampson and len(self.s_pa):
            F, ok = self._sampson_F(R, t)
            s = np.minimum(self._sampson_rows(F), SAMPSON_ERR_CAP_SQPX)
            h = _huber_sq(s, pr.huber_sampson_sqpx) * ok[self.s_row_pair]
            per_pair = np.add.reduceat(h, self.s_seg) / self.s_counts
            samp = float(per_pair.sum())
        return rel, pr.lambda_sampson * samp

    def _sampson_F(self, R, t):
        """Fundamental matrix per sampson pair; ok marks nonzero baselines."""
        Ra, Rb = R[self.s_pa], R[self.s_pb]
        t_ba = np.einsum("pji,pj->pi", Rb, t[self.s_pa] - t[self.s_pb])
        ok = np.linalg.norm(t_ba, axis=1) > 1e-12
        R_ba = np.einsum("pji,pjk->pik", Rb, Ra)
        E = _hat_stack(t_ba) @ R_ba
        Ki = self.cam.matrix_inv
        return np.einsum("ij,pjk,kl->pil", Ki.T, E, Ki), ok

    def _sampson_rows(self, F):
        """Per-row Sampson error under each row's pair geometry."""
        Frow = F[self.s_row_pair]
        Fa = np.einsum("sij,sj->si", Frow, self.s_xa)
        Ftb = np.einsum("skj,sk->sj", Frow, self.s_xb)
        num = np.einsum("si,si->s", self.s_xb, Fa)
        den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
        return num * num / np.maximum(den, 1e-15)

    def objective(self, R, t, w):
        """Full objective including the weight regularizer."""
        U2 = self.problem.robust_weight_scale ** 2
        d = self.data_terms(R, t)
        rel, samp = self.pair_costs(R, t)
        reg = U2 * float(np.sum(w - np.log(w))) if len(w) else 0.0
        return float(np.dot(w, d)) + reg + rel + samp

    # -- normal equations --------------------------------------------------

    def assemble(self, R, t, w):
        """Gradient and block data for the damped normal equations."""
        pr = self.problem
        g6 = np.zeros((self.K, 6))
        data = np.zeros((self._n_blocks, 6, 6))

        # priors
        if len(self.prior_frames):
            rt = t[self.prior_idx] - self.P_t
            M = R[self.prior_idx] @ np.transpose(self.P_R, (0, 2, 1))
            phi = _log_stack(M)
            Jl = _jl_inv_stack(phi)
            rho = pr.rotation_weight
            # residual r = [rt; rho*phi]; J = [[I,0],[0,rho*Jl]]
            g6[self.prior_idx, :3] += 2.0 * w[:, None] * rt
            g6[self.prior_idx, 3:] += (
                2.0 * w[:, None] * rho ** 2 * np.einsum("kji,kj->ki", Jl, phi)
            )
            blocks = np.zeros((len(w), 6, 6))
            blocks[:, 0, 0] = blocks[:, 1, 1] = blocks[:, 2, 2] = 2.0 * w
            blocks[:, 3:, 3:] = (
                2.0 * w[:, None, None] * rho ** 2
                * np.einsum("kji,kjl->kil", Jl, Jl)
            )
            data[self.prior_idx] += blocks

        # reprojection
        if self.use_reproj and len(self.m_frame):
            cam = self.cam
            Rf = R[self.m_frame]
            diff = self.m_xyz - t[self.m_frame]
            p = np.einsum("mji,mj->mi", Rf, diff)
            z = np.maximum(p[:, 2], 1e-6)
            res = np.empty_like(self.m_uv)
            res[:, 0] = cam.fx * p[:, 0] / z + cam.cx - self.m_uv[:, 0]
            res[:, 1] = cam.fy * p[:, 1] / z + cam.cy - self.m_uv[:, 1]
            e = np.hypot(res[:, 0], res[:, 1])
            omega = np.where(e <= pr.huber_reproj_px, 1.0,
                             pr.huber_reproj_px / np.maximum(e, 1e-12))
            omega = omega * (e <= REPROJ_ERR_CAP_PX)
            A = np.zeros((len(z), 2, 3))
            A[:, 0, 0] = cam.fx / z
            A[:, 0, 2] = -cam.fx * p[:, 0] / (z * z)
            A[:, 1, 1] = cam.fy / z
            A[:, 1, 2] = -cam.fy * p[:, 1] / (z * z)
            J = np.empty((len(z), 2, 6))
            J[:, :, :3] = -np.einsum("mij,mkj->mik", A, Rf)
            J[:, :, 3:] = np.einsum(
                "mik,mkl->mil", -J[:, :, :3], _hat_stack(diff)
            )
            # per-row scale: w_k * lambda1 / |F_k|, huber slope folded in
            w_row = np.repeat(w[self.reproj_prior_pos], self.m_counts)
            cnt_row = np.repeat(self.m_counts, self.m_counts)
            s_row = 2.0 * pr.lambda_reproj * w_row * omega / cnt_row
            gm = np.einsum("m,mi,mij->mj", s_row, res, J)
            Hmm = np.einsum("m,mri,mrj->mij", s_row, J, J)
            g6[self._reproj_fidx] += np.add.reduceat(gm, self.m_seg)
            data[self._reproj_fidx] += np.add.reduceat(Hmm, self.m_seg)

        # relative pose terms
        if len(self.rel_a):
            Ra = R[self.rel_a]
            Rat = np.transpose(Ra, (0, 2, 1))
            dt = t[self.rel_b] - t[self.rel_a]
            rt = np.einsum("pji,pj->pi", Ra, dt) - self.Z_t
            rel_R = np.einsum("pji,pjk->pik", Ra, R[self.rel_b])
            phi = _log_stack(rel_R @ np.transpose(self.Z_R, (0, 2, 1)))
            Jl = _jl_inv_stack(phi)
            rho = pr.rotation_weight
            Ja = np.zeros((len(dt), 6, 6))
            Jb = np.zeros((len(dt), 6, 6))
            Ja[:, :3, :3] = -Rat
            Ja[:, :3, 3:] = np.einsum("pij,pjk->pik", Rat, _hat_stack(dt))
            JlRat = rho * np.einsum("pij,pjk->pik", Jl, Rat)
            Ja[:, 3:, 3:] = -JlRat
            Jb[:, :3, :3] = Rat
            Jb[:, 3:, 3:] = JlRat
            r6 = np.concatenate([rt, rho * phi], axis=1)
            np.add.at(g6, self.rel_a, 2.0 * np.einsum("pri,pr->pi", Ja, r6))
            np.add.at(g6, self.rel_b, 2.0 * np.einsum("pri,pr->pi", Jb, r6))
            Hab = 2.0 * np.einsum("pri,prj->pij", Ja, Jb)
            np.add.at(data, self._rel_blk, 2.0 * np.einsum("pri,prj->pij", Ja, Ja))
            np.add.at(data, self._rel_blk + 1, Hab)
            np.add.at(data, self._rel_blk + 2, np.transpose(Hab, (0, 2, 1)))
            np.add.at(data, self._rel_blk + 3, 2.0 * np.einsum("pri,prj->pij", Jb, Jb))

        # sampson pair terms
        if self.use_sampson and len(self.s_pa):
            dsq = pr.huber_sampson_sqpx
            F, ok = self._sampson_F(R, t)
            Frow = F[self.s_row_pair]
            Fa = np.einsum("sij,sj->si", Frow, self.s_xa)
            Ftb = np.einsum("skj,sk->sj", Frow, self.s_xb)
            num = np.einsum("si,si->s", self.s_xb, Fa)
            den = np.maximum(
                Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2,
                1e-15,
            )
            s = num * num / den
            dnum = np.einsum("si,sj->sij", self.s_xb, self.s_xa)
            P2a = Fa.copy()
            P2a[:, 2] = 0.0
            P2b = Ftb.copy()
            P2b[:, 2] = 0.0
            dden = 2.0 * (np.einsum("si,sj->sij", P2a, self.s_xa)
                          + np.einsum("si,sj->sij", self.s_xb, P2b))
            dS = ((2.0 * num / den)[:, None, None] * dnum
                  - (s / den)[:, None, None] * dden)
            hp = np.where(s <= dsq, 1.0, np.sqrt(dsq / np.maximum(s, 1e-15)))
            hp = hp * ok[self.s_row_pair] * (s <= SAMPSON_ERR_CAP_SQPX)
            D = self._axis_stack(R, t)
            per_axis = np.einsum("sij,saij->sa", dS, D[self.s_row_pair])
            lam_row = pr.lambda_sampson / self.s_counts[self.s_row_pair]
            gp = np.add.reduceat((lam_row * hp)[:, None] * per_axis, self.s_seg)
            np.add.at(g6, self.s_pa, gp[:, :6])
            np.add.at(g6, self.s_pb, gp[:, 6:])
            # Gauss-Newton-style curvature from the squared structure
            curve = lam_row * hp / (2.0 * np.maximum(s, 1e-9))
            outer = np.einsum("s,si,sj->sij", curve, per_axis, per_axis)
            Hp = np.add.reduceat(outer, self.s_seg)
            np.add.at(data, self._s_blk, Hp[:, :6, :6])
            np.add.at(data, self._s_blk + 1, Hp[:, :6, 6:])
            np.add.at(data, self._s_blk + 2, Hp[:, 6:, :6])
            np.add.at(data, self._s_blk + 3, Hp[:, 6:, 6:])

        return g6.ravel(), data

    def _axis_stack(self, R, t):
        """d F / d xi for all 12 axes of every sampson pair, batched."""
        Ra, Rb = R[self.s_pa], R[self.s_pb]
        Rbt = np.transpose(Rb, (0, 2, 1))
        R_ba = Rbt @ Ra
        dt_ab = t[self.s_pa] - t[self.s_pb]
        t_ba = np.einsum("pij,pj->pi", Rbt, dt_ab)
        hat_tba = _hat_stack(t_ba)
        Ki = self.cam.matrix_inv
        Kit = Ki.T
        D = np.empty((len(self.s_pa), 12, 3, 3))
        for j in range(3):
            Ej = hat(np.eye(3)[j])
            # translation of a (and its negation for b)
            dE = _hat_stack(Rb[:, j, :]) @ R_ba
            D[:, j] = np.einsum("ij,pjk,kl->pil", Kit, dE, Ki)
            D[:, 6 + j] = -D[:, j]
            # rotation of a
            term = np.einsum("pij,jk,pkl->pil", Rbt, Ej, Ra)
            D[:, 3 + j] = np.einsum(
                "ij,pjk,kl->pil", Kit, hat_tba @ term, Ki
            )
            # rotation of b: both t_ba and R_ba move
            dtj = -np.einsum("pij,jk,pk->pi", Rbt, Ej, dt_ab)
            dE = _hat_stack(dtj) @ R_ba - hat_tba @ term
            D[:, 9 + j] = np.einsum("ij,pjk,kl->pil", Kit, dE, Ki)
        return D

    def solve_normal(self, g, data, lam):
        n = 6 * self.K
        diag = data[: self.K].diagonal(axis1=1, axis2=2).reshape(self.K, 6).copy()
        if self.pair_list:
            view = data[self.K :].reshape(len(self.pair_list), 4, 6, 6)
            np.add.at(diag, self._pair_a, view[:, 0].diagonal(axis1=1, axis2=2))
            np.add.at(diag, self._pair_b, view[:, 3].diagonal(axis1=1, axis2=2))
        bump = lam * diag.ravel() + 1e-9
        values = np.concatenate([data.ravel(), bump])
        H = coo_matrix((values, (self._rows, self._cols)), shape=(n, n)).tocsr()
        try:
            step = spsolve(H, -g)
        except RuntimeError as exc:
            raise SolverDivergedError(f"sparse solve failed: {exc}") from None
        if not np.all(np.isfinite(step)):
            raise SolverDivergedError("non-finite Newton step")
        return step

    def apply(self, R, t, step):
        xi = step.reshape(self.K, 6)
        return _exp_stack(xi[:, 3:]) @ R, t + xi[:, :3]


# ---------------------------------------------------------------------------
# EM steps


def e_step(state: RefinementState, problem: RefinementProblem,
           use_reproj: bool = True, _ws: _Workspace = None) -> dict:
    """Closed-form weight update w = U^2 / (U^2 + d); returns the new dict."""
    ws = _ws or _Workspace(problem, use_reproj, False)
    R, t = ws.pack(state.poses)
    d = ws.data_terms(R, t)
    U2 = problem.robust_weight_scale ** 2
    w = U2 / (U2 + d)
    return {f: float(w[i]) for i, f in enumerate(ws.prior_frames)}


def m_step(state: RefinementState, problem: RefinementProblem,
           use_reproj: bool = True, use_sampson: bool = True,
           max_iters: int = 12, _ws: _Workspace = None) -> dict:
    """Damped least-squares pose update with the weights held fixed.

    Steps are accepted only if the true objective decreases, so the
    post-state never scores worse than the input state.
    """
    ws = _ws or _Workspace(problem, use_reproj, use_sampson)
    R, t = ws.pack(state.poses)
    w = np.array([state.weights.get(f, 1.0) for f in ws.prior_frames])
    cost = ws.objective(R, t, w)
    if not np.isfinite(cost):
        raise SolverDivergedError(f"objective is {cost} before the pose update")
    lam = 1e-4
    for _ in range(max_iters):
        g, data = ws.assemble(R, t, w)
        moved = False
        cost_prev = cost
        for _try in range(8):
            step = ws.solve_normal(g, data, lam)
            R_new, t_new = ws.apply(R, t, step)
            cost_new = ws.objective(R_new, t_new, w)
            if np.isfinite(cost_new) and cost_new < cost:
                R, t, cost = R_new, t_new, cost_new
                lam = max(lam * 0.3, 1e-10)
                moved = True
                break
            lam *= 6.0
        if not moved or float(np.max(np.abs(step))) < 1e-10:
            break
        if cost_prev - cost < 1e-12 * (1.0 + abs(cost)):
            break
    return ws.unpack(R, t)


def initialize_seeds(problem: RefinementProblem, min_matches: int = 10) -> dict:
    """Initial poses: frames whose prior has enough matches anchor directly;
    every other frame chains the measured consecutive relative poses from its
    nearest seed (ties broken toward the earlier seed)."""
    frames = problem.frames
    seeds = [
        f for f in frames
        if f in problem.priors and len(problem.priors[f].matches) >= min_matches
    ]
    if not seeds:
        raise NoSeedsError(
            f"no prior has {min_matches} or more matches to seed from"
        )
    seed_set = set(seeds)
    pos = {f: i for i, f in enumerate(frames)}
    fwd = {}
    for r in problem.relatives:
        if pos.get(r.frame_b, -1) == pos.get(r.frame_a, -2) + 1:
            fwd[r.frame_a] = r.z

    # sweep left to right then right to left, keeping the nearer seed;
    # on equal distance the left (earlier) seed wins
    best = {f: (np.inf, None) for f in frames}  # distance, pose
    run = None
    dist = 0
    for f in frames:
        if f in seed_set:
            run, dist = problem.priors[f].pose, 0
        elif run is not None:
            prev = frames[pos[f] - 1]
            if prev in fwd:
                run, dist = compose(run, fwd[prev]), dist + 1
            else:
                run = None
        if run is not None:
            best[f] = (dist, run)
    run = None
    dist = 0
    for f in reversed(frames):
        if f in seed_set:
            run, dist = problem.priors[f].pose, 0
        elif run is not None:
            nxt = frames[pos[f] + 1]
            if f in fwd:
                run, dist = compose(run, inverse(fwd[f])), dist + 1
            else:
                run = None
        if run is not None and dist < best[f][0]:
            best[f] = (dist, run)

    out = {}
    for f in frames:
        _, pose = best[f]
        if pose is None:
            # unreachable by odometry: fall back to its own prior if any
            if f in problem.priors:
                pose = problem.priors[f].pose
            else:
                raise NoSeedsError(f"frame {f} is unreachable from any seed")
        out[f] = pose
    return out


def prune_tracks(track, z: Pose, cam: CameraIntrinsics,
                 threshold_sqpx: float = 4.0, min_rows: int = 8):
    """Drop track rows inconsistent with a measured relative pose.

    The epipolar geometry implied by z (pose of frame b in frame a's own
    frame) filters gross mismatches before the tracks enter an optimization;
    returns None when fewer than min_rows survive or z has no baseline.
    """
    if track is None or not len(track):
        return None
    try:
        F = fundamental_from_poses(Pose.identity(), z, cam, cam)
    except DegenerateBaselineError:
        return None
    keep = sampson_errors(F, track.uv_a, track.uv_b) <= threshold_sqpx
    if int(keep.sum()) < min_rows:
        return None
    return MatchSet2D2D(track.frame_a, track.frame_b,
                        track.uv_a[keep], track.uv_b[keep])


def build_problem(frames, priors, odometry, tracks,
                  cam: CameraIntrinsics, config=None) -> RefinementProblem:
    """Wire pipeline-stage outputs into a refinement problem.

    `priors` maps frame ids to PriorTerm, `odometry` yields
    (frame_a, frame_b, pose) measurements, and `tracks` holds MatchSet2D2D
    looked up by frame pair; each track set is gated against its odometry
    epipolar geometry before it enters the problem.
    """
    threshold = 4.0
    kw = {}
    if config is not None:
        threshold = config.epipolar_prune_threshold
        kw = dict(
            lambda_reproj=config.lambda_reproj,
            lambda_sampson=config.lambda_sampson,
            robust_weight_scale=config.robust_weight_scale,
            rotation_weight=config.rotation_weight,
            huber_reproj_px=config.huber_reproj_px,
            huber_sampson_sqpx=config.huber_sampson_sqpx,
        )
    index = {(t.frame_a, t.frame_b): t for t in tracks}
    relatives = [
        RelativeTerm(a, b, z, prune_tracks(index.get((a, b)), z, cam, threshold))
        for a, b, z in odometry
    ]
    return RefinementProblem(frames=list(frames), priors=dict(priors),
                             relatives=relatives, cam=cam, **kw).validate()


def variant_flags(variant: str):
    """(use_reproj, use_sampson) for an ablation name."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown refine variant {variant!r}")
    return {
        "pgba": (True, True),
        "pgo": (False, False),
        "pgo_2d2d": (False, True),
        "pgo_2d3d": (True, False),
    }[variant]


def refine(problem: RefinementProblem, config=None, variant: str = None,
           min_matches: int = None, initial_poses: dict = None):
    """Alternate E- and M-steps until the weights settle.

    Returns (poses, weights, log) where log rows are
    (iteration, step, objective, max_dw, runtime_ms) with step "E" or "M";
    the objective column includes the weight regularizer, so it is
    non-increasing down the whole log. When `initial_poses` covers every
    frame the usual seeding is skipped and optimization starts there — a
    follow-up round warm-starts from the trajectory it is improving.
    """
    problem.validate()
    if config is not None:
        variant = variant or config.refine_variant
        min_matches = config.seed_min_matches if min_matches is None else min_matches
        em_tol = config.em_weight_tol
        em_iters = config.em_max_iters
        lm_iters = config.lm_max_iters
    else:
        variant = variant or "pgba"
        min_matches = 10 if min_matches is None else min_matches
        em_tol = 1e-3
        em_iters = 20
        lm_iters = 12
    use_reproj, use_sampson = variant_flags(variant)

    if initial_poses is None:
        start = initialize_seeds(problem, min_matches)
    else:
        missing = [f for f in problem.frames if f not in initial_poses]
        if missing:
            raise ValueError(f"initial_poses misses {len(missing)} frames, "
                             f"first {missing[0]}")
        start = {f: initial_poses[f] for f in problem.frames}
    ws = _Workspace(problem, use_reproj, use_sampson)
    state = RefinementState(
        poses=start,
        weights={f: 1.0 for f in ws.prior_frames},
    )
    log = []
    for it in range(1, em_iters + 1):
        t0 = time.perf_counter()
        new_w = e_step(state, problem, use_reproj, _ws=ws)
        max_dw = max(
            (abs(new_w[f] - state.weights[f]) for f in new_w), default=0.0
        )
        state.weights = new_w
        R, t = ws.pack(state.poses)
        w_vec = np.array([state.weights[f] for f in ws.prior_frames])
        obj = ws.objective(R, t, w_vec)
        log.append((it, "E", obj, max_dw, (time.perf_counter() - t0) * 1e3))

        t0 = time.perf_counter()
        state.poses = m_step(state, problem, use_reproj, use_sampson,
                             max_iters=lm_iters, _ws=ws)
        R, t = ws.pack(state.poses)
        obj = ws.objective(R, t, w_vec)
        log.append((it, "M", obj, 0.0, (time.perf_counter() - t0) * 1e3))
        state.iteration = it
        # the all-ones initial weights are a convention, not an E-step
        # output, so convergence is only judged from the second pass on
        if it >= 2 and max_dw < em_tol:
            break
    return state.poses, state.weights, log

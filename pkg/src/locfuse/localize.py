"""Single-frame localization against per-session maps.

Per session and query frame, each 3D source contributes a raw 2D-3D match
set. Sources are pre-filtered independently with RANSAC-PnP, the surviving
inliers are pooled and deduplicated, and a final RANSAC-PnP over the pool
yields the session's candidate pose. The RANSAC kernel fits every minimal
sample with a damped least-squares solve started from a perturbation of the
best model so far; the very first fits are started from a coarse linear
(EPnP-style) solve over all matches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoConsensusError, TooFewMatchesError
from .geometry import CameraIntrinsics, Pose, project_points
from .matches import Match2D3D, match_arrays

# warm-start perturbation applied to the best-so-far model before each refit
PERTURB_T = 0.05  # meters
PERTURB_R = 0.01  # radians
_CHUNKS = (8, 12, 24, 64)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from integer parts; keeps nested RANSAC calls
    decorrelated while remaining reproducible across platforms."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Candidate:
    """One session's pose hypothesis for one query frame."""

    frame_id: int
    session_id: int
    pose: Pose
    matches: list  # inlier Match2D3D records backing the pose

    @property
    def inlier_count(self) -> int:
        return len(self.matches)


def _batch_exp(rotvecs):
    """Rodrigues over a (B, 3) stack."""
    theta = np.linalg.norm(rotvecs, axis=1)
    B = len(rotvecs)
    K = np.zeros((B, 3, 3))
    K[:, 0, 1] = -rotvecs[:, 2]
    K[:, 0, 2] = rotvecs[:, 1]
    K[:, 1, 0] = rotvecs[:, 2]
    K[:, 1, 2] = -rotvecs[:, 0]
    K[:, 2, 0] = -rotvecs[:, 1]
    K[:, 2, 1] = rotvecs[:, 0]
    small = theta < 1e-8
    a = np.empty(B)
    b = np.empty(B)
    a[small] = 1.0
    b[small] = 0.5
    ts = theta[~small]
    a[~small] = np.sin(ts) / ts
    b[~small] = (1.0 - np.cos(ts)) / (ts * ts)
    KK = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def _batch_cam_coords(R, t, pts):
    """Camera-frame coordinates for stacked poses; pts is (B, m, 3)."""
    diff = pts - t[:, None, :]
    return np.einsum("bji,bmj->bmi", R, diff)


def _batch_residual_cost(R, t, pts, uv, cam):
    p = _batch_cam_coords(R, t, pts)
    z = np.where(p[..., 2] > 1e-6, p[..., 2], 1e-6)
    res = np.empty_like(uv)
    res[..., 0] = cam.fx * p[..., 0] / z + cam.cx - uv[..., 0]
    res[..., 1] = cam.fy * p[..., 1] / z + cam.cy - uv[..., 1]
    # behind-camera points get a fixed large penalty so cost stays bounded
    bad = p[..., 2] <= 1e-6
    res[bad] = 1e4
    return res, p, z

def _batch_lm(uv, xyz, cam, R0, t0, iters=8):
    """Damped least-squares pose fits, one per batch row.

    uv: (B, m, 2) pixels, xyz: (B, m, 3) world points. Returns refined
    (R, t) stacks; rows that never find a descent step keep their input.
    """
    R = R0.copy()
    t = t0.copy()
    B = len(R)
    lam = np.full(B, 1e-3)
    res, p, z = _batch_residual_cost(R, t, xyz, uv, cam)
    cost = np.einsum("bmi,bmi->b", res, res)
    for _ in range(iters):
        # Jacobian wrt (dt, dtheta), left perturbation on the rotation
        A = np.zeros((B, xyz.shape[1], 2, 3))
        A[..., 0, 0] = cam.fx / z
        A[..., 0, 2] = -cam.fx * p[..., 0] / (z * z)
        A[..., 1, 1] = cam.fy / z
        A[..., 1, 2] = -cam.fy * p[..., 1] / (z * z)
        Rt = np.transpose(R, (0, 2, 1))
        diff = xyz - t[:, None, :]
        Hat = np.zeros((B, xyz.shape[1], 3, 3))
        Hat[..., 0, 1] = -diff[..., 2]
        Hat[..., 0, 2] = diff[..., 1]
        Hat[..., 1, 0] = diff[..., 2]
        Hat[..., 1, 2] = -diff[..., 0]
        Hat[..., 2, 0] = -diff[..., 1]
        Hat[..., 2, 1] = diff[..., 0]
        J_t = -np.einsum("bmij,bjk->bmik", A, Rt)
        J_r = np.einsum("bmij,bjl,bmlk->bmik", A, Rt, Hat)
        J = np.concatenate([J_t, J_r], axis=3)  # (B, m, 2, 6)
        H = np.einsum("bmri,bmrj->bij", J, J)
        g = np.einsum("bmri,bmr->bi", J, res)
        diag = np.einsum("bii->bi", H)
        damp = lam[:, None] * (diag + 1e-9)
        Hd = H + damp[:, None] * np.eye(6)[None]
        try:
            step = np.linalg.solve(Hd, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            lam *= 4.0
            continue
        t_new = t + step[:, :3]
        R_new = _batch_exp(step[:, 3:]) @ R
        res_new, p_new, z_new = _batch_residual_cost(R_new, t_new, xyz, uv, cam)
        cost_new = np.einsum("bmi,bmi->b", res_new, res_new)
        accept = cost_new < cost
        R[accept] = R_new[accept]
        t[accept] = t_new[accept]
        res[accept] = res_new[accept]
        p[accept] = p_new[accept]
        z[accept] = z_new[accept]
        cost[accept] = cost_new[accept]
        lam[accept] = np.maximum(lam[accept] * 0.3, 1e-9)
        lam[~accept] *= 4.0
        # once every proposed step has collapsed nothing will change anymore
        if float(np.max(np.abs(step))) < 1e-9:
            break
    return R, t


def _count_inliers_batch(R, t, uv, xyz, cam, threshold_px):
    """Inlier masks (B, n) for a stack of poses over a shared match set."""
    p = np.einsum("bji,nj->bni", R, xyz) - np.einsum("bji,bj->bi", R, t)[:, None, :]
    z = p[..., 2]
    safe = np.where(z > 1e-9, z, 1e-9)
    du = cam.fx * p[..., 0] / safe + cam.cx - uv[:, 0]
    dv = cam.fy * p[..., 1] / safe + cam.cy - uv[:, 1]
    err2 = du * du + dv * dv
    return (z > 0) & (err2 <= threshold_px * threshold_px)


def _kabsch(src, dst):
    """Rigid map dst ~ R @ src + t between matched point sets."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vh = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vh.T @ U.T))
    R = Vh.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, dc - R @ sc


def _pnp_linear(uv, xyz, cam):
    """Coarse EPnP-style linear pose: four control points, one null vector,
    scale fixed by Procrustes. Accurate enough to seed the iterative fits;
    needs clearly more than the minimal four matches to be well posed."""
    n = len(uv)
    c = xyz.mean(axis=0)
    Xc = xyz - c
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    scales = S / max(np.sqrt(n), 1.0)
    floor = max(scales.max(), 1.0) * 1e-3
    scales = np.maximum(scales, floor)
    ctrl_w = np.vstack([c, c + scales[:, None] * Vt])  # (4, 3)
    A = np.vstack([ctrl_w.T, np.ones(4)])  # (4, 4)
    rhs = np.vstack([xyz.T, np.ones(n)])
    alphas = np.linalg.solve(A, rhs).T  # (n, 4)

    M = np.zeros((2 * n, 12))
    for j in range(4):
        M[0::2, 3 * j + 0] = alphas[:, j] * cam.fx
        M[0::2, 3 * j + 2] = alphas[:, j] * (cam.cx - uv[:, 0])
        M[1::2, 3 * j + 1] = alphas[:, j] * cam.fy
        M[1::2, 3 * j + 2] = alphas[:, j] * (cam.cy - uv[:, 1])
    _, _, VtM = np.linalg.svd(M, full_matrices=False)
    ctrl_c = VtM[-1].reshape(4, 3)

    dw = ctrl_w - ctrl_w.mean(axis=0)
    dc = ctrl_c - ctrl_c.mean(axis=0)
    denom = float(np.sum(dc * dc))
    if denom < 1e-18:
        raise NoConsensusError("degenerate linear PnP system")
    beta = float(np.sum(np.linalg.norm(dw, axis=1) * np.linalg.norm(dc, axis=1))) / denom
    ctrl_c = ctrl_c * beta

    Rcw, tcw = _kabsch(ctrl_w, ctrl_c)
    depths = (xyz @ Rcw.T + tcw)[:, 2]
    if np.mean(depths) < 0:
        Rcw, tcw = _kabsch(ctrl_w, -ctrl_c)
    return Pose.from_rt(Rcw.T, -Rcw.T @ tcw)


def _p3p_batch(uv, xyz, cam):
    """Pose candidates for a stack of three-point samples.

    Law-of-cosines reduction: with depth ratios u = s2/s1 and v = s3/s1 the
    three pairwise distance constraints become two quadratics in u whose
    coefficients are quadratic in v; eliminating u with the resultant of the
    two quadratics leaves a quartic in v. Each admissible root gives depths,
    camera-frame points and a rigid alignment.

    uv is (B, 3, 2), xyz is (B, 3, 3). Returns (R, t, ok) with shapes
    (B, 4, 3, 3), (B, 4, 3) and (B, 4): up to four world-from-camera poses
    per sample, flagged valid in ok.
    """
    B = len(uv)
    f = np.empty((B, 3, 3))
    f[..., 0] = (uv[..., 0] - cam.cx) / cam.fx
    f[..., 1] = (uv[..., 1] - cam.cy) / cam.fy
    f[..., 2] = 1.0
    f /= np.linalg.norm(f, axis=2, keepdims=True)
    cab = np.einsum("bi,bi->b", f[:, 0], f[:, 1])
    cac = np.einsum("bi,bi->b", f[:, 0], f[:, 2])
    cbc = np.einsum("bi,bi->b", f[:, 1], f[:, 2])
    c2 = np.sum((xyz[:, 0] - xyz[:, 1]) ** 2, axis=1)
    b2 = np.sum((xyz[:, 0] - xyz[:, 2]) ** 2, axis=1)
    a2 = np.sum((xyz[:, 1] - xyz[:, 2]) ** 2, axis=1)
    good = np.minimum(np.minimum(a2, b2), c2) > 1e-12
    b2s = np.where(good, b2, 1.0)
    k = c2 / b2s
    m = a2 / b2s

    # quadratics in u, coefficients ascending in v:
    #   u^2 - 2*cab*u + (1 - k*Q) = 0
    #   u^2 - 2*cbc*v*u + (v^2 - m*Q) = 0      with Q = 1 + v^2 - 2*cac*v
    # resultant = (B0 - A0)^2 - (B1 - A1)*(A1*B0 - A0*B1), expanded by hand
    d0_0 = k - m - 1.0
    d0_1 = 2.0 * cac * (m - k)
    d0_2 = 1.0 + k - m
    d1_0 = 2.0 * cab
    d1_1 = -2.0 * cbc
    e1_0 = 2.0 * cab * m
    e1_1 = -4.0 * cab * cac * m + 2.0 * cbc * (1.0 - k)
    e1_2 = -2.0 * cab * (1.0 - m) + 4.0 * cbc * cac * k
    e1_3 = -2.0 * cbc * k
    q0 = d0_0 * d0_0 - d1_0 * e1_0
    q1 = 2.0 * d0_0 * d0_1 - d1_0 * e1_1 - d1_1 * e1_0
    q2 = d0_1 * d0_1 + 2.0 * d0_0 * d0_2 - d1_0 * e1_2 - d1_1 * e1_1
    q3 = 2.0 * d0_1 * d0_2 - d1_0 * e1_3 - d1_1 * e1_2
    q4 = d0_2 * d0_2 - d1_1 * e1_3
    scale = np.max(np.abs(np.stack([q0, q1, q2, q3])), axis=0)
    good &= np.abs(q4) > 1e-12 * np.maximum(scale, 1.0)
    q4s = np.where(np.abs(q4) > 1e-300, q4, 1.0)
    comp = np.zeros((B, 4, 4))
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[:, 0, 3] = -q0 / q4s
    comp[:, 1, 3] = -q1 / q4s
    comp[:, 2, 3] = -q2 / q4s
    comp[:, 3, 3] = -q3 / q4s
    roots = np.linalg.eigvals(comp)  # (B, 4)

    v = roots.real
    ok = good[:, None] & (np.abs(roots.imag) <= 1e-8 * np.maximum(1.0, np.abs(v)))
    ok &= v > 0
    Qv = 1.0 + v * v - 2.0 * cac[:, None] * v
    ok &= Qv > 1e-14
    Qv_s = np.where(ok, Qv, 1.0)
    s1 = np.sqrt(b2s[:, None] / Qv_s)
    disc = cab[:, None] ** 2 - (1.0 - k[:, None] * Qv_s)
    ok &= disc >= 0.0
    rt = np.sqrt(np.where(disc > 0.0, disc, 0.0))
    u_lo = cab[:, None] - rt
    u_hi = cab[:, None] + rt
    # both branches can be geometrically valid; keep the one consistent with
    # the second quadratic
    gap_lo = np.abs(u_lo * u_lo - 2.0 * cbc[:, None] * v * u_lo + (v * v - m[:, None] * Qv_s))
    gap_hi = np.abs(u_hi * u_hi - 2.0 * cbc[:, None] * v * u_hi + (v * v - m[:, None] * Qv_s))
    pick_hi = ((u_lo <= 0) & (u_hi > 0)) | ((u_lo > 0) & (u_hi > 0) & (gap_hi < gap_lo))
    u = np.where(pick_hi, u_hi, u_lo)
    ok &= u > 0

    depths = np.stack([np.ones_like(u), u, v], axis=2) * s1[..., None]  # (B, 4, 3)
    Y = depths[..., None] * f[:, None, :, :]  # camera-frame points (B, 4, 3, 3)
    X = np.broadcast_to(xyz[:, None], Y.shape)
    Xm = X - X.mean(axis=2, keepdims=True)
    Ym = Y - Y.mean(axis=2, keepdims=True)
    H = np.einsum("brpi,brpj->brij", Xm, Ym)
    U, _, Vh = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vh))
    Vh = Vh.copy()
    Vh[..., 2, :] *= d[..., None]
    Rcw = np.einsum("brji,brkj->brik", Vh, U)  # Vh^T D U^T with D folded in
    tcw = Y.mean(axis=2) - np.einsum("brij,brj->bri", Rcw, X.mean(axis=2))
    R = np.transpose(Rcw, (0, 1, 3, 2))
    t = -np.einsum("brij,bri->brj", Rcw, tcw)
    ok &= np.isfinite(R).all(axis=(2, 3)) & np.isfinite(t).all(axis=2)
    return R, t, ok


def _p3p(uv, xyz, cam):
    """All poses fitting three 2D-3D correspondences exactly, as a list."""
    R, t, ok = _p3p_batch(uv[None], xyz[None], cam)
    return [Pose.from_rt(R[0, i], t[0, i]) for i in np.flatnonzero(ok[0])]


def _count_inliers(pose, uv, xyz, cam, threshold_px):
    uv_hat, depth = project_points(pose, cam, xyz)
    err = np.linalg.norm(uv_hat - uv, axis=1)
    mask = (depth > 0) & (err <= threshold_px)
    return mask


def _needed_iters(ratio, confidence, max_iters):
    if ratio <= 0.0:
        return max_iters
    if ratio >= 1.0:
        # full support already: no minimal sample can beat the current model
        return 0
    denom = np.log1p(-min(ratio**4, 1.0 - 1e-12))
    need = np.log(1.0 - confidence) / denom
    return int(min(max_iters, max(1, np.ceil(need))))


def ransac_pnp(
    matches,
    cam: CameraIntrinsics,
    threshold_px: float = 3.0,
    max_iters: int = 1000,
    confidence: float = 0.999,
    rng_seed: int = 0,
    initial_pose: Pose = None,
):
    """Robust pose from 2D-3D matches.

    Returns (pose, inlier_indices). Raises TooFewMatchesError below the
    minimal sample size and NoConsensusError when no model reaches four
    inliers. Deterministic for a fixed rng_seed. An `initial_pose`, when
    given, competes with every sampled hypothesis on equal terms — callers
    holding a trustworthy model (a refined trajectory pose, say) keep the
    refit from wandering on a clean match set while still letting a better
    supported sample win outright.
    """
    n = len(matches)
    if n < 4:
        raise TooFewMatchesError(f"need at least 4 matches, got {n}")
    uv, xyz = match_arrays(matches)
    rng = np.random.Generator(np.random.PCG64(rng_seed))

    try:
        best_pose = _pnp_linear(uv, xyz, cam)
    except (NoConsensusError, np.linalg.LinAlgError):
        best_pose = Pose.identity()
    best_mask = _count_inliers(best_pose, uv, xyz, cam, threshold_px)
    best_count = int(best_mask.sum())
    if initial_pose is not None:
        mask = _count_inliers(initial_pose, uv, xyz, cam, threshold_px)
        if int(mask.sum()) >= best_count:
            best_pose, best_mask = initial_pose, mask
            best_count = int(mask.sum())

    done = 0
    chunk_idx = 0
    while done < _needed_iters(best_count / n, confidence, max_iters):
        B = min(
            _CHUNKS[min(chunk_idx, len(_CHUNKS) - 1)],
            max_iters - done,
        )
        if B <= 0:
            break
        chunk_idx += 1
        order = np.argsort(rng.random((B, n)), axis=1)[:, :4]
        s_uv = uv[order]
        s_xyz = xyz[order]
        if best_count >= 4:
            # warm restarts around the best supported model so far
            t0 = best_pose.t[None] + rng.normal(scale=PERTURB_T, size=(B, 3))
            R0 = _batch_exp(rng.normal(scale=PERTURB_R, size=(B, 3))) @ best_pose.R[None]
            lm_iters = 5
        else:
            # no credible model yet: seed each fit from an exact three-point
            # solve on the sample, keeping the root that best explains the
            # fourth sampled match
            R0 = np.repeat(best_pose.R[None], B, axis=0)
            t0 = np.repeat(best_pose.t[None], B, axis=0)
            Rc, tc, okc = _p3p_batch(s_uv[:, :3], s_xyz[:, :3], cam)
            p4 = np.einsum("brji,bj->bri", Rc, s_xyz[:, 3]) - np.einsum(
                "brji,brj->bri", Rc, tc
            )
            z4 = p4[..., 2]
            okc &= z4 > 1e-6
            z4s = np.where(okc, z4, 1.0)
            du = cam.fx * p4[..., 0] / z4s + cam.cx - s_uv[:, 3, 0, None]
            dv = cam.fy * p4[..., 1] / z4s + cam.cy - s_uv[:, 3, 1, None]
            err4 = np.where(okc, du * du + dv * dv, np.inf)
            pick = np.argmin(err4, axis=1)
            has = np.isfinite(err4[np.arange(B), pick])
            R0[has] = Rc[has, pick[has]]
            t0[has] = tc[has, pick[has]]
            lm_iters = 4
        Rf, tf = _batch_lm(s_uv, s_xyz, cam, R0, t0, iters=lm_iters)
        finite = np.isfinite(Rf).all(axis=(1, 2)) & np.isfinite(tf).all(axis=1)
        Rf[~finite] = np.eye(3)
        tf[~finite] = 0.0
        masks = _count_inliers_batch(Rf, tf, uv, xyz, cam, threshold_px)
        counts = np.where(finite, masks.sum(axis=1), -1)
        b = int(np.argmax(counts))
        if counts[b] > best_count:
            best_pose = Pose.from_rt(Rf[b], tf[b])
            best_mask = masks[b]
            best_count = int(counts[b])
        done += B

    if best_count < 4:
        raise NoConsensusError(f"best model has {best_count} inliers")

    # final polish over all inliers, kept only if it does not lose support
    idx = np.flatnonzero(best_mask)
    Rr, tr = _batch_lm(
        uv[idx][None], xyz[idx][None], cam, best_pose.R[None], best_pose.t[None],
        iters=12,
    )
    if np.all(np.isfinite(Rr)) and np.all(np.isfinite(tr)):
        refined = Pose.from_rt(Rr[0], tr[0])
        mask = _count_inliers(refined, uv, xyz, cam, threshold_px)
        if int(mask.sum()) >= best_count:
            best_pose, best_mask = refined, mask
    return best_pose, np.flatnonzero(best_mask)


def dedupe_matches(matches, pose_hint: Pose, cam: CameraIntrinsics, radius_px: float = 0.5):
    """Collapse matches that share a query detection (same pixel within
    radius_px), keeping the one with the smallest reprojection error under
    the hint pose. Input order is preserved for the survivors."""
    if not matches:
        return []
    uv, xyz = match_arrays(matches)
    uv_hat, depth = project_points(pose_hint, cam, xyz)
    err = np.linalg.norm(uv_hat - uv, axis=1)
    err[depth <= 0] = np.inf

    rep_px = np.empty((len(matches), 2))  # representative pixels, in order
    rep_best = []  # index of the current best member per representative
    for i in range(len(matches)):
        if rep_best:
            d = np.hypot(rep_px[: len(rep_best), 0] - uv[i, 0],
                         rep_px[: len(rep_best), 1] - uv[i, 1])
            hit = np.flatnonzero(d <= radius_px)
        else:
            hit = ()
        if len(hit):
            g = int(hit[0])
            if err[i] < err[rep_best[g]]:
                rep_best[g] = i
        else:
            rep_px[len(rep_best)] = uv[i]
            rep_best.append(i)
    return [matches[i] for i in sorted(rep_best)]


def localize_frame(
    frame_id: int,
    session_id: int,
    matches,
    cam: CameraIntrinsics,
    threshold_px: float = 3.0,
    max_iters: int = 1000,
    confidence: float = 0.999,
    dedupe_radius_px: float = 0.5,
    rng_seed: int = 0,
):
    """Candidate pose for one session at one query frame.

    Matches are grouped by source, pre-filtered per source with RANSAC-PnP,
    pooled, deduplicated against the strongest source's pose, and re-fit.
    """
    by_source = {}
    for m in matches:
        by_source.setdefault(m.source, []).append(m)

    pools = []
    for k, source in enumerate(sorted(by_source)):
        group = by_source[source]
        if len(group) < 4:
            continue
        try:
            pose_s, idx = ransac_pnp(
                group, cam, threshold_px=threshold_px, max_iters=max_iters,
                confidence=confidence,
                rng_seed=derive_seed(rng_seed, frame_id, session_id, k),
            )
        except NoConsensusError:
            continue
        pools.append((len(idx), pose_s, [group[i] for i in idx]))
    if not pools:
        raise NoConsensusError(
            f"no source produced a model for frame {frame_id}, session {session_id}"
        )

    hint = max(pools, key=lambda p: p[0])[1]
    pooled = [m for _, _, inliers in pools for m in inliers]
    deduped = dedupe_matches(pooled, hint, cam, radius_px=dedupe_radius_px)
    if len(deduped) < 4:
        raise NoConsensusError("fewer than 4 matches after deduplication")
    pose, idx = ransac_pnp(
        deduped, cam, threshold_px=threshold_px, max_iters=max_iters,
        confidence=confidence,
        rng_seed=derive_seed(rng_seed, frame_id, session_id, 997),
    )
    return Candidate(frame_id, session_id, pose, [deduped[i] for i in idx])


def localize_frame_merged(
    frame_id: int,
    bundles: dict,
    cam: CameraIntrinsics,
    threshold_px: float = 3.0,
    max_iters: int = 1000,
    confidence: float = 0.999,
    dedupe_radius_px: float = 0.5,
    rng_seed: int = 0,
):
    """Single-map baseline: pool the per-session pre-filtered matches from
    every session and fit one pose. This is the merge strategy the chain
    consensus is compared against."""
    pooled = []
    hint = None
    hint_count = 0
    for session_id in sorted(bundles):
        group = bundles[session_id]
        if len(group) < 4:
            continue
        try:
            pose_s, idx = ransac_pnp(
                group, cam, threshold_px=threshold_px, max_iters=max_iters,
                confidence=confidence,
                rng_seed=derive_seed(rng_seed, frame_id, session_id, 13),
            )
        except NoConsensusError:
            continue
        if len(idx) > hint_count:
            hint, hint_count = pose_s, len(idx)
        pooled.extend(group[i] for i in idx)
    if hint is None or len(pooled) < 4:
        raise NoConsensusError(f"merge found no model for frame {frame_id}")
    deduped = dedupe_matches(pooled, hint, cam, radius_px=dedupe_radius_px)
    if len(deduped) < 4:
        raise NoConsensusError("fewer than 4 matches after deduplication")
    pose, idx = ransac_pnp(
        deduped, cam, threshold_px=threshold_px, max_iters=max_iters,
        confidence=confidence, rng_seed=derive_seed(rng_seed, frame_id, 31, 14),
    )
    return pose, [deduped[i] for i in idx]

import numpy as np

from locfuse.config import PipelineConfig
from locfuse.geometry import Pose, compose, project, relative_pose, so3_exp, unproject
from locfuse.matches import Match2D3D, MatchSet2D2D
from locfuse.refine import (
    PriorTerm,
    RefinementProblem,
    RefinementState,
    RelativeTerm,
    apply_delta,
    e_step,
    grad_reprojection,
    grad_sampson_pair,
    initialize_seeds,
    jac_pose_prior,
    jac_relative,
    m_step,
    refine,
    residual_pose_prior,
    residual_relative,
    residual_reprojection,
    residual_sampson_pair,
    _Workspace,
)

CAM = PipelineConfig().camera()


def rand_pose(rng, span=3.0):
    return Pose.from_rotvec(rng.normal(0, 0.4, 3), rng.normal(0, span, 3))


def fd_grad(fun, pose, eps=1e-6):
    g = np.zeros(6)
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = eps
        hi = fun(apply_delta(pose, xi))
        xi[i] = -eps
        lo = fun(apply_delta(pose, xi))
        g[i] = (hi - lo) / (2 * eps)
    return g


def fd_jac(fun, pose, eps=1e-6):
    cols = []
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = eps
        hi = fun(apply_delta(pose, xi))
        xi[i] = -eps
        lo = fun(apply_delta(pose, xi))
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


rng = np.random.default_rng(0)

# --- 1. prior jacobian
worst = 0.0
for _ in range(50):
    x, p = rand_pose(rng), rand_pose(rng)
    J = jac_pose_prior(x, p, 1.3)
    Jfd = fd_jac(lambda q: residual_pose_prior(q, p, 1.3), x)
    worst = max(worst, rel_err(J, Jfd))
print("prior jac worst rel err:", worst)

# --- 2. relative jacobian
worst = 0.0
for _ in range(50):
    xa, xb, z = rand_pose(rng), rand_pose(rng), rand_pose(rng)
    Ja, Jb = jac_relative(xa, xb, z, 0.8)
    Jfa = fd_jac(lambda q: residual_relative(q, xb, z, 0.8), xa)
    Jfb = fd_jac(lambda q: residual_relative(xa, q, z, 0.8), xb)
    worst = max(worst, rel_err(Ja, Jfa), rel_err(Jb, Jfb))
print("relative jac worst rel err:", worst)


def make_matches(rng, pose, n=25, noise=1.0, gross=2):
    ms = []
    for i in range(n):
        uv = rng.uniform([40, 40], [600, 440])
        depth = rng.uniform(5, 30)
        w = unproject(pose, CAM, uv, depth)
        duv = rng.normal(0, noise, 2)
        if i < gross:
            duv = rng.uniform(-80, 80, 2)
        ms.append(Match2D3D(query=uv + duv, world=w))
    return ms


# --- 3. reprojection gradient (mixed huber regions)
worst = 0.0
for _ in range(50):
    x = rand_pose(rng)
    ms = make_matches(rng, x, noise=1.5, gross=4)
    xj = apply_delta(x, rng.normal(0, 0.01, 6))
    g = grad_reprojection(xj, ms, CAM)
    gfd = fd_grad(lambda q: residual_reprojection(q, ms, CAM), xj)
    worst = max(worst, rel_err(g, gfd))
print("reproj grad worst rel err:", worst)

# --- 4. sampson gradient
worst = 0.0
for _ in range(50):
    xa = rand_pose(rng, span=2.0)
    xb = compose(xa, Pose.from_rotvec(rng.normal(0, 0.05, 3),
                                      rng.normal(0, 1.0, 3) + [0, 0, 1.5]))
    uva, uvb = [], []
    for _i in range(30):
        uv = rng.uniform([40, 40], [600, 440])
        w = unproject(xa, CAM, uv, rng.uniform(6, 30))
        try:
            vb = project(xb, CAM, w)
        except Exception:
            continue
        if not (0 <= vb[0] < 640 and 0 <= vb[1] < 480):
            continue
        uva.append(uv + rng.normal(0, 0.8, 2))
        uvb.append(vb + rng.normal(0, 0.8, 2))
    if len(uva) < 8:
        continue
    track = MatchSet2D2D(0, 1, np.array(uva), np.array(uvb))
    ga, gb = grad_sampson_pair(xa, xb, track, CAM)
    gfa = fd_grad(lambda q: residual_sampson_pair(q, xb, track, CAM), xa)
    gfb = fd_grad(lambda q: residual_sampson_pair(xa, q, track, CAM), xb)
    worst = max(worst, rel_err(ga, gfa), rel_err(gb, gfb))
print("sampson grad worst rel err:", worst)


# --- 5. build a chain problem, workspace objective vs scalar sum
def chain_problem(rng, K=12, outliers=(3, 7)):
    true = [Pose.from_rotvec(np.zeros(3), np.zeros(3))]
    for k in range(1, K):
        true.append(compose(true[-1], Pose.from_rotvec(
            rng.normal(0, 0.02, 3), [0.04, 0.01, 1.2] + rng.normal(0, 0.02, 3))))
    priors, relatives = {}, []
    for k in range(K):
        noise = rng.normal(0, 0.04, 3)
        if k in outliers:
            noise = rng.normal(0, 0.3, 3) + 5.0
        p = Pose.from_rotvec(rng.normal(0, 0.004, 3), true[k].t + noise)
        p = Pose.from_rt(p.R @ true[k].R, p.t)
        priors[k] = PriorTerm(pose=p, matches=make_matches(rng, true[k], n=20,
                                                           noise=1.0, gross=1))
    for k in range(K - 1):
        z = relative_pose(true[k], true[k + 1])
        z = Pose.from_rt(so3_exp(rng.normal(0, 0.001, 3)) @ z.R,
                         z.t + rng.normal(0, 0.005, 3))
        uva, uvb = [], []
        for _i in range(25):
            uv = rng.uniform([40, 40], [600, 440])
            w = unproject(true[k], CAM, uv, rng.uniform(6, 30))
            try:
                vb = project(true[k + 1], CAM, w)
            except Exception:
                continue
            if not (0 <= vb[0] < 640 and 0 <= vb[1] < 480):
                continue
            uva.append(uv + rng.normal(0, 0.6, 2))
            uvb.append(vb + rng.normal(0, 0.6, 2))
        tracks = MatchSet2D2D(k, k + 1, np.array(uva), np.array(uvb)) if len(uva) >= 8 else None
        relatives.append(RelativeTerm(k, k + 1, z, tracks))
    return RefinementProblem(frames=list(range(K)), priors=priors,
                             relatives=relatives, cam=CAM), true


prob, true = chain_problem(rng)
ws = _Workspace(prob, True, True)
poses = initialize_seeds(prob, 10)
R, t = ws.pack(poses)
w = np.full(len(ws.prior_frames), 0.8)

scalar_total = 0.0
for i, f in enumerate(ws.prior_frames):
    pt = prob.priors[f]
    r = residual_pose_prior(poses[f], pt.pose, prob.rotation_weight)
    d = float(r @ r)
    if pt.matches:
        d += prob.lambda_reproj * residual_reprojection(poses[f], pt.matches, CAM)
    scalar_total += w[i] * d
U2 = prob.robust_weight_scale ** 2
scalar_total += U2 * float(np.sum(w - np.log(w)))
for relterm in prob.relatives:
    r = residual_relative(poses[relterm.frame_a], poses[relterm.frame_b],
                          relterm.z, prob.rotation_weight)
    scalar_total += float(r @ r)
    if relterm.tracks is not None and len(relterm.tracks):
        scalar_total += prob.lambda_sampson * residual_sampson_pair(
            poses[relterm.frame_a], poses[relterm.frame_b], relterm.tracks, CAM)
print("objective scalar vs workspace:", scalar_total, ws.objective(R, t, w),
      abs(scalar_total - ws.objective(R, t, w)))

# --- 6. e_step against the closed form + grid
state = RefinementState(poses=poses, weights={f: 1.0 for f in ws.prior_frames})
wnew = e_step(state, prob, _ws=ws)
d_terms = ws.data_terms(R, t)
grid = np.linspace(1e-4, 1.0, 100)
ok = True
for i, f in enumerate(ws.prior_frames):
    scores = grid * d_terms[i] + U2 * (grid - np.log(grid))
    wg = grid[int(np.argmin(scores))]
    if abs(wg - wnew[f]) > 0.011:
        ok = False
        print("  e_step mismatch", f, wg, wnew[f], d_terms[i])
print("e_step grid agreement:", ok)

# --- 7. full refine: monotonic log, outliers downweighted, rmse drop
poses_ref, weights, log = refine(prob, variant="pgba")
objs = [row[2] for row in log]
mono = all(objs[i + 1] <= objs[i] + 1e-9 for i in range(len(objs) - 1))
print("monotone objective:", mono, "rows:", len(log))
print("weights:", {f: round(weights[f], 3) for f in weights})
err0 = np.array([np.linalg.norm(prob.priors[k].pose.t - true[k].t) for k in range(12)])
err1 = np.array([np.linalg.norm(poses_ref[k].t - true[k].t) for k in range(12)])
print("prior rmse:", np.sqrt(np.mean(err0 ** 2)), "refined rmse:", np.sqrt(np.mean(err1 ** 2)))
print("inlier frames err:", np.round(err1[[0, 1, 2, 4, 5, 6, 8, 9, 10, 11]], 4))

# --- 8. variants run
for v in ("pgo", "pgo_2d2d", "pgo_2d3d"):
    pv, wv, lv = refine(prob, variant=v)
    ov = [row[2] for row in lv]
    print(v, "monotone:", all(ov[i + 1] <= ov[i] + 1e-9 for i in range(len(ov) - 1)),
          "rmse:", np.sqrt(np.mean([np.linalg.norm(pv[k].t - true[k].t) ** 2
                                    for k in range(12)])))

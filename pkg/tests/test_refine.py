"""EM refinement checks: derivatives, weight updates, and the full loop.

Every analytic Jacobian is validated against central finite differences of
the matching residual through `apply_delta`. The closed-form weight update
is validated against a dense grid search of the per-frame weight objective,
and the alternating loop is checked for the properties it advertises: a
non-increasing objective column, outlier priors driven toward zero weight,
and insensitivity to deleting a prior whose weight has collapsed.
"""

import numpy as np
import pytest

from locfuse.config import PipelineConfig
from locfuse.errors import EmptyMatchSetError, NoSeedsError
from locfuse.geometry import (
    Pose,
    compose,
    project,
    relative_pose,
    so3_exp,
    so3_log,
    unproject,
)
from locfuse.matches import Match2D3D, MatchSet2D2D
from locfuse.refine import (
    PriorTerm,
    RefinementProblem,
    RefinementState,
    RelativeTerm,
    VARIANTS,
    apply_delta,
    e_step,
    grad_reprojection,
    grad_sampson_pair,
    initialize_seeds,
    jac_pose_prior,
    jac_relative,
    prune_tracks,
    refine,
    residual_pose_prior,
    residual_relative,
    residual_reprojection,
    residual_sampson_pair,
    variant_flags,
)

from helpers import CAM, rng_for


def _rand_pose(rng, span=3.0):
    return Pose.from_rotvec(rng.normal(0, 0.4, 3), rng.normal(0, span, 3))


def _fd_grad(fun, pose, eps=1e-6):
    """Central finite differences through the local parameterization."""
    g = np.zeros(6)
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = eps
        hi = fun(apply_delta(pose, xi))
        xi[i] = -eps
        lo = fun(apply_delta(pose, xi))
        g[i] = (hi - lo) / (2 * eps)
    return g


def _fd_jac(fun, pose, eps=1e-6):
    cols = []
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = eps
        hi = fun(apply_delta(pose, xi))
        xi[i] = -eps
        lo = fun(apply_delta(pose, xi))
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def _rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / denom


def _poses_close(a, b, tol=1e-9):
    return (np.linalg.norm(a.t - b.t) < tol
            and np.linalg.norm(so3_log(a.R @ b.R.T)) < tol)


def _make_matches(rng, pose, n=25, noise=1.0, gross=2):
    """2D-3D matches seen from pose, a few of them grossly wrong."""
    ms = []
    for i in range(n):
        uv = rng.uniform([40, 40], [600, 440])
        world = unproject(pose, CAM, uv, rng.uniform(5, 30))
        duv = rng.uniform(-80, 80, 2) if i < gross else rng.normal(0, noise, 2)
        ms.append(Match2D3D(query=uv + duv, world=world))
    return ms


def _covisible_track(rng, pose_a, pose_b, n=25, noise=0.6):
    uva, uvb = [], []
    while len(uva) < n:
        uv = rng.uniform([40, 40], [600, 440])
        world = unproject(pose_a, CAM, uv, rng.uniform(6, 30))
        try:
            vb = project(pose_b, CAM, world)
        except Exception:
            continue
        if not (0 <= vb[0] < CAM.width and 0 <= vb[1] < CAM.height):
            continue
        uva.append(uv + rng.normal(0, noise, 2))
        uvb.append(vb + rng.normal(0, noise, 2))
    return MatchSet2D2D(0, 1, np.array(uva), np.array(uvb))


def _chain_problem(rng, n_frames=12, outliers=(3, 7)):
    """Forward-moving chain with noisy priors, two of them 5 m off."""
    true = [Pose.identity()]
    for _ in range(1, n_frames):
        step = Pose.from_rotvec(rng.normal(0, 0.02, 3),
                                [0.04, 0.01, 1.2] + rng.normal(0, 0.02, 3))
        true.append(compose(true[-1], step))
    priors = {}
    for k in range(n_frames):
        shift = rng.normal(0, 0.04, 3)
        if k in outliers:
            shift = rng.normal(0, 0.3, 3) + 5.0
        p = Pose.from_rt(so3_exp(rng.normal(0, 0.004, 3)) @ true[k].R,
                         true[k].t + shift)
        # match sets enter the problem after geometric verification, so no
        # gross rows here; the derivative tests add their own
        priors[k] = PriorTerm(pose=p, matches=_make_matches(
            rng, true[k], n=20, noise=1.0, gross=0))
    relatives = []
    for k in range(n_frames - 1):
        z = relative_pose(true[k], true[k + 1])
        z = Pose.from_rt(so3_exp(rng.normal(0, 0.001, 3)) @ z.R,
                         z.t + rng.normal(0, 0.005, 3))
        tracks = _covisible_track(rng, true[k], true[k + 1])
        relatives.append(RelativeTerm(k, k + 1, z, tracks))
    problem = RefinementProblem(frames=list(range(n_frames)), priors=priors,
                                relatives=relatives, cam=CAM)
    return problem, true


# ---------------------------------------------------------------------------
# analytic derivatives against finite differences


def test_prior_jacobian_matches_fd():
    rng = rng_for(801)
    for _ in range(40):
        x, p = _rand_pose(rng), _rand_pose(rng)
        J = jac_pose_prior(x, p, 1.3)
        Jfd = _fd_jac(lambda q: residual_pose_prior(q, p, 1.3), x)
        assert _rel_err(J, Jfd) < 1e-5


def test_relative_jacobian_matches_fd():
    rng = rng_for(802)
    for _ in range(40):
        xa, xb, z = _rand_pose(rng), _rand_pose(rng), _rand_pose(rng)
        Ja, Jb = jac_relative(xa, xb, z, 0.8)
        Jfa = _fd_jac(lambda q: residual_relative(q, xb, z, 0.8), xa)
        Jfb = _fd_jac(lambda q: residual_relative(xa, q, z, 0.8), xb)
        assert _rel_err(Ja, Jfa) < 1e-5
        assert _rel_err(Jb, Jfb) < 1e-5


def test_reprojection_gradient_matches_fd():
    """Gross rows push some residuals into the linear robust region, so both
    branches of the slope are exercised."""
    rng = rng_for(803)
    for _ in range(40):
        x = _rand_pose(rng)
        ms = _make_matches(rng, x, noise=1.5, gross=4)
        xj = apply_delta(x, rng.normal(0, 0.01, 6))
        g = grad_reprojection(xj, ms, CAM)
        gfd = _fd_grad(lambda q: residual_reprojection(q, ms, CAM), xj)
        assert _rel_err(g, gfd) < 1e-5


def test_sampson_gradient_matches_fd():
    rng = rng_for(804)
    done = 0
    while done < 40:
        xa = _rand_pose(rng, span=2.0)
        xb = compose(xa, Pose.from_rotvec(rng.normal(0, 0.05, 3),
                                          rng.normal(0, 1.0, 3) + [0, 0, 1.5]))
        track = _covisible_track(rng, xa, xb, n=25, noise=0.8)
        ga, gb = grad_sampson_pair(xa, xb, track, CAM)
        gfa = _fd_grad(lambda q: residual_sampson_pair(q, xb, track, CAM), xa)
        gfb = _fd_grad(lambda q: residual_sampson_pair(xa, q, track, CAM), xb)
        assert _rel_err(ga, gfa) < 1e-5
        assert _rel_err(gb, gfb) < 1e-5
        done += 1


def test_empty_terms_raise():
    empty = MatchSet2D2D(0, 1, np.zeros((0, 2)), np.zeros((0, 2)))
    x = Pose.identity()
    y = Pose.from_rotvec(np.zeros(3), [1.0, 0, 0])
    with pytest.raises(EmptyMatchSetError):
        residual_reprojection(x, [], CAM)
    with pytest.raises(EmptyMatchSetError):
        grad_reprojection(x, [], CAM)
    with pytest.raises(EmptyMatchSetError):
        residual_sampson_pair(x, y, empty, CAM)
    with pytest.raises(EmptyMatchSetError):
        grad_sampson_pair(x, y, empty, CAM)


def test_sampson_pair_degenerate_baseline_is_neutral():
    """Coincident frames carry no epipolar information: zero cost, zero pull."""
    rng = rng_for(805)
    x = _rand_pose(rng)
    track = MatchSet2D2D(0, 1, rng.uniform(0, 600, (10, 2)),
                         rng.uniform(0, 600, (10, 2)))
    assert residual_sampson_pair(x, x, track, CAM) == 0.0
    ga, gb = grad_sampson_pair(x, x, track, CAM)
    assert np.all(ga == 0.0) and np.all(gb == 0.0)


def test_apply_delta_semantics():
    rng = rng_for(806)
    pose = _rand_pose(rng)
    assert _poses_close(apply_delta(pose, np.zeros(6)), pose, tol=1e-12)
    xi = rng.normal(0, 0.2, 6)
    moved = apply_delta(pose, xi)
    assert np.allclose(moved.t, pose.t + xi[:3])
    assert np.allclose(moved.R, so3_exp(xi[3:]) @ pose.R)


# ---------------------------------------------------------------------------
# weight update


def test_e_step_matches_grid_search():
    """The closed-form weight must sit at the minimum of the per-frame
    weight objective w*d + U^2*(w - ln w), checked against a 100-point grid."""
    rng = rng_for(810)
    problem, _ = _chain_problem(rng)
    poses = initialize_seeds(problem)
    state = RefinementState(poses=poses, weights={f: 1.0 for f in problem.priors})
    w_new = e_step(state, problem)
    U2 = problem.robust_weight_scale ** 2
    grid = np.linspace(1e-4, 1.0, 100)
    spacing = grid[1] - grid[0]
    for f, w in w_new.items():
        pt = problem.priors[f]
        r = residual_pose_prior(poses[f], pt.pose, problem.rotation_weight)
        d = float(r @ r)
        if pt.matches:
            d += problem.lambda_reproj * residual_reprojection(
                poses[f], pt.matches, problem.cam)
        scores = grid * d + U2 * (grid - np.log(grid))
        w_grid = grid[int(np.argmin(scores))]
        assert abs(w - w_grid) <= spacing + 1e-9
        assert w * d + U2 * (w - np.log(w)) <= scores.min() + 1e-9
        assert 0.0 < w <= 1.0


def test_e_step_ignores_reprojection_when_disabled():
    rng = rng_for(811)
    problem, _ = _chain_problem(rng)
    poses = initialize_seeds(problem)
    state = RefinementState(poses=poses, weights={f: 1.0 for f in problem.priors})
    w_with = e_step(state, problem, use_reproj=True)
    w_without = e_step(state, problem, use_reproj=False)
    U2 = problem.robust_weight_scale ** 2
    for f in problem.priors:
        r = residual_pose_prior(poses[f], problem.priors[f].pose,
                                problem.rotation_weight)
        expect = U2 / (U2 + float(r @ r))
        assert abs(w_without[f] - expect) < 1e-12
    # the match term can only add evidence against a prior
    assert all(w_with[f] <= w_without[f] + 1e-12 for f in problem.priors)


# ---------------------------------------------------------------------------
# seeding


def _thick_prior(rng, pose, n=15):
    return PriorTerm(pose=pose, matches=_make_matches(rng, pose, n=n, gross=0))


def test_initialize_seeds_prefers_nearer_then_earlier():
    rng = rng_for(820)
    zs = [Pose.from_rotvec(rng.normal(0, 0.05, 3), rng.normal(0, 1.0, 3))
          for _ in range(4)]
    pa, pb = _rand_pose(rng), _rand_pose(rng)
    priors = {0: _thick_prior(rng, pa), 4: _thick_prior(rng, pb)}
    relatives = [RelativeTerm(k, k + 1, zs[k]) for k in range(4)]
    problem = RefinementProblem(frames=list(range(5)), priors=priors,
                                relatives=relatives, cam=CAM)
    seeds = initialize_seeds(problem)
    # anchors keep their prior pose exactly
    assert _poses_close(seeds[0], pa)
    assert _poses_close(seeds[4], pb)
    # frame 1 chains forward, frame 3 chains backward from the nearer anchor
    assert _poses_close(seeds[1], compose(pa, zs[0]))
    back = compose(pb, Pose.from_rt(zs[3].R.T, -(zs[3].R.T @ zs[3].t)))
    assert _poses_close(seeds[3], back)
    # frame 2 is equidistant: the earlier anchor wins
    assert _poses_close(seeds[2], compose(compose(pa, zs[0]), zs[1]))


def test_initialize_seeds_thin_priors_do_not_anchor():
    rng = rng_for(821)
    z = Pose.from_rotvec(np.zeros(3), [0, 0, 1.0])
    pa = _rand_pose(rng)
    thin = PriorTerm(pose=_rand_pose(rng), matches=_make_matches(
        rng, _rand_pose(rng), n=3, gross=0))
    problem = RefinementProblem(
        frames=[0, 1], priors={0: _thick_prior(rng, pa), 1: thin},
        relatives=[RelativeTerm(0, 1, z)], cam=CAM)
    seeds = initialize_seeds(problem, min_matches=10)
    assert _poses_close(seeds[1], compose(pa, z))


def test_initialize_seeds_unreachable_falls_back_to_prior():
    rng = rng_for(822)
    pa = _rand_pose(rng)
    lonely = _rand_pose(rng)
    problem = RefinementProblem(
        frames=[0, 1, 2],
        priors={0: _thick_prior(rng, pa), 2: PriorTerm(pose=lonely)},
        relatives=[RelativeTerm(0, 1, Pose.from_rotvec(np.zeros(3), [0, 0, 1]))],
        cam=CAM)
    seeds = initialize_seeds(problem)
    assert _poses_close(seeds[2], lonely)


def test_initialize_seeds_raises_without_anchors():
    rng = rng_for(823)
    problem = RefinementProblem(
        frames=[0, 1], priors={0: PriorTerm(pose=_rand_pose(rng))},
        relatives=[RelativeTerm(0, 1, Pose.from_rotvec(np.zeros(3), [0, 0, 1]))],
        cam=CAM)
    with pytest.raises(NoSeedsError):
        initialize_seeds(problem)
    disconnected = RefinementProblem(
        frames=[0, 1], priors={0: _thick_prior(rng, _rand_pose(rng))},
        relatives=[], cam=CAM)
    with pytest.raises(NoSeedsError):
        initialize_seeds(disconnected)


# ---------------------------------------------------------------------------
# track gating


def test_prune_tracks_keeps_consistent_rows():
    rng = rng_for(830)
    for _ in range(5):
        pose_a = _rand_pose(rng, span=2.0)
        z = Pose.from_rotvec(rng.normal(0, 0.03, 3),
                             rng.normal(0, 0.2, 3) + [0, 0, 1.4])
        pose_b = compose(pose_a, z)
        track = _covisible_track(rng, pose_a, pose_b, n=30, noise=0.3)
        n_out = 12
        uva = np.vstack([track.uv_a, rng.uniform([0, 0], [640, 480], (n_out, 2))])
        uvb = np.vstack([track.uv_b, rng.uniform([0, 0], [640, 480], (n_out, 2))])
        mixed = MatchSet2D2D(0, 1, uva, uvb)
        pruned = prune_tracks(mixed, z, CAM, threshold_sqpx=4.0)
        assert pruned is not None
        assert len(pruned) >= len(track)  # every clean row survives
        assert len(pruned) <= len(track) + n_out // 3  # most junk does not


def test_prune_tracks_refuses_thin_or_degenerate_input():
    rng = rng_for(831)
    track = MatchSet2D2D(0, 1, rng.uniform(0, 600, (20, 2)),
                         rng.uniform(0, 600, (20, 2)))
    assert prune_tracks(None, Pose.identity(), CAM) is None
    empty = MatchSet2D2D(0, 1, np.zeros((0, 2)), np.zeros((0, 2)))
    assert prune_tracks(empty, _rand_pose(rng), CAM) is None
    # no baseline means no epipolar gate
    assert prune_tracks(track, Pose.identity(), CAM) is None
    # uniformly random pairs against a real motion: too few rows survive
    z = Pose.from_rotvec(np.zeros(3), [0, 0, 1.0])
    assert prune_tracks(track, z, CAM, min_rows=15) is None


# ---------------------------------------------------------------------------
# the alternating loop


def test_refine_objective_is_monotone():
    """Every row of the iteration log, weight update and pose update alike,
    must not increase the regularized objective."""
    for seed in (840, 841, 842):
        rng = rng_for(seed)
        problem, _ = _chain_problem(rng)
        _, _, log = refine(problem, variant="pgba")
        objs = [row[2] for row in log]
        assert len(objs) >= 4
        for prev, cur in zip(objs, objs[1:]):
            assert cur <= prev + 1e-9 * max(1.0, abs(prev))


def test_refine_log_shape():
    rng = rng_for(843)
    problem, _ = _chain_problem(rng)
    cfg = PipelineConfig(em_max_iters=2)
    _, _, log = refine(problem, config=cfg)
    assert [(row[0], row[1]) for row in log] == [(1, "E"), (1, "M"), (2, "E"), (2, "M")]
    for row in log:
        assert len(row) == 5
        assert row[4] >= 0.0  # runtime in milliseconds
    assert all(row[3] == 0.0 for row in log if row[1] == "M")


def test_refine_downweights_outlier_priors():
    rng = rng_for(844)
    problem, true = _chain_problem(rng, outliers=(3, 7))
    poses, weights, _ = refine(problem, variant="pgba")
    for f, w in weights.items():
        assert 0.0 < w <= 1.0
        if f in (3, 7):
            assert w < 0.3
        else:
            assert w > 0.7
    err_prior = [np.linalg.norm(problem.priors[k].pose.t - true[k].t)
                 for k in problem.frames]
    err_ref = [np.linalg.norm(poses[k].t - true[k].t) for k in problem.frames]
    rmse_prior = float(np.sqrt(np.mean(np.square(err_prior))))
    rmse_ref = float(np.sqrt(np.mean(np.square(err_ref))))
    assert rmse_ref < rmse_prior / 5.0
    # the frames whose priors lied still land near the truth
    assert max(err_ref[3], err_ref[7]) < 0.5


def test_refine_variants_run_and_rank():
    """All ablations stay monotone; using both match channels must not do
    worse than the bare pose graph on a contaminated chain."""
    rng = rng_for(845)
    problem, true = _chain_problem(rng)

    def rmse(poses):
        return float(np.sqrt(np.mean([
            np.linalg.norm(poses[k].t - true[k].t) ** 2 for k in problem.frames
        ])))

    scores = {}
    for variant in VARIANTS:
        poses, _, log = refine(problem, variant=variant)
        objs = [row[2] for row in log]
        assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(objs, objs[1:]))
        scores[variant] = rmse(poses)
    assert scores["pgba"] < scores["pgo"]


def test_variant_flags():
    assert variant_flags("pgba") == (True, True)
    assert variant_flags("pgo") == (False, False)
    assert variant_flags("pgo_2d2d") == (False, True)
    assert variant_flags("pgo_2d3d") == (True, False)
    with pytest.raises(ValueError):
        variant_flags("everything")


def test_deleting_a_collapsed_prior_changes_nothing():
    """A prior at absurd distance gets weight ~U^2/d^2; removing it from the
    problem must leave every refined pose essentially untouched."""
    rng = rng_for(846)
    problem, _ = _chain_problem(rng, outliers=())
    far = Pose.from_rotvec(rng.normal(0, 0.1, 3),
                           problem.priors[5].pose.t + [1e7, 0, 0])
    problem.priors[5] = PriorTerm(pose=far, matches=[])
    poses_full, weights, _ = refine(problem, variant="pgba")
    assert weights[5] < 1e-12

    del problem.priors[5]
    poses_cut, _, _ = refine(problem, variant="pgba")
    for f in problem.frames:
        dt = np.linalg.norm(poses_full[f].t - poses_cut[f].t)
        dr = np.linalg.norm(so3_log(poses_full[f].R @ poses_cut[f].R.T))
        assert dt < 1e-6 and dr < 1e-6


def test_problem_validation():
    rng = rng_for(847)
    with pytest.raises(ValueError):
        RefinementProblem(frames=[], priors={}, relatives=[], cam=CAM).validate()
    with pytest.raises(ValueError):
        RefinementProblem(frames=[0], priors={1: PriorTerm(pose=_rand_pose(rng))},
                          relatives=[], cam=CAM).validate()
    with pytest.raises(ValueError):
        RefinementProblem(frames=[0, 1], priors={},
                          relatives=[RelativeTerm(0, 2, Pose.identity())],
                          cam=CAM).validate()
    with pytest.raises(ValueError):
        RefinementProblem(frames=[0], priors={}, relatives=[], cam=CAM,
                          lambda_reproj=0.0).validate()

"""Reprojection-guided second pass over an already-refined trajectory.

Once a refined trajectory exists, every 2D-3D match from every session can
be screened against the pose it ought to be consistent with — a much
sharper test than anything available before refinement. The surviving
matches yield recomputed per-session poses, and one more consensus +
refinement round runs on the cleaner evidence. The extra round runs exactly
once: this module never invokes itself, so the total number of
consensus/refinement executions in a pipeline is capped at two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import Selection, build_chain, solve_dp
from .errors import NoConsensusError, TooFewMatchesError
from .geometry import CameraIntrinsics, Pose, project_points
from .localize import Candidate, derive_seed, ransac_pnp
from .matches import match_arrays
from .refine import PriorTerm, build_problem, refine


def guided_prune(pose: Pose, matches, cam: CameraIntrinsics,
                 threshold_px: float = 3.0) -> list:
    """Matches whose reprojection under the given pose stays within bounds.

    Rows behind the camera are always dropped. The output is a subset of the
    input in the original order, so pruning twice at the same pose changes
    nothing.
    """
    if not len(matches):
        return []
    uv, xyz = match_arrays(matches)
    proj, depth = project_points(pose, cam, xyz)
    err = np.linalg.norm(proj - uv, axis=1)
    keep = (depth > 0.0) & (err <= threshold_px)
    return [m for m, k in zip(matches, keep) if k]


@dataclass
class PolishResult:
    """Trajectory and bookkeeping from the extra round."""

    poses: dict  # frame_id -> Pose
    weights: dict  # frame_id -> prior weight after the second refinement
    log: list  # refinement iteration log of the second round
    candidates: dict  # frame_id -> {session_id: recomputed Candidate}
    selection: Selection
    kept_matches: int = 0
    dropped_matches: int = 0


def polish(frames, bundles, tracks, odometry, poses, config=None,
           cam: CameraIntrinsics = None, rng_seed: int = 0,
           previous: dict = None) -> PolishResult:
    """Prune with the refined poses, re-localize, and refine once more.

    `bundles` holds the raw per-frame, per-session 2D-3D matches;
    `poses` is the refined trajectory guiding the pruning. Frames whose
    pruned sessions all fail to produce a model simply carry no prior into
    the second round and ride on their neighbors. Errors from the underlying
    stages (an empty chain, no usable seeds) propagate unchanged.

    `previous`, when given, maps frame_id -> {session_id: Candidate} from the
    first localization round. A recomputed pose landing within
    `polish_snap_m` of its predecessor is treated as the same estimate and
    the predecessor's pose is kept (the cleaned match list still replaces
    the old one). Without this, re-fitting evidence that pruning barely
    touched shifts every pose by a few millimeters, the consensus scores
    all wobble, and the selection can reroute whole stretches of the
    trajectory on noise-level margins.
    """
    if cam is None:
        if config is None:
            raise ValueError("polish needs a camera or a config providing one")
        cam = config.camera()
    if config is not None:
        prune_px = config.polish_threshold_px
        ransac_px = config.ransac_threshold_px
        ransac_iters = config.ransac_max_iters
        confidence = config.ransac_confidence
        edge_px = config.sampson_inlier_threshold
        snap_m = config.polish_snap_m
    else:
        prune_px, ransac_px, ransac_iters, confidence, edge_px = (
            3.0, 3.0, 1000, 0.999, 4.0)
        snap_m = 0.02

    kept = dropped = 0
    candidates = {}
    for f in frames:
        per_frame = {}
        pose = poses.get(f)
        for session in sorted(bundles.get(f, {})):
            matches = bundles[f][session]
            if pose is None:
                dropped += len(matches)
                continue
            survivors = guided_prune(pose, matches, cam, prune_px)
            kept += len(survivors)
            dropped += len(matches) - len(survivors)
            if len(survivors) < 4:
                continue
            try:
                # the refined pose competes as a hypothesis: on an
                # already-clean session it keeps the refit anchored instead
                # of redrawing the sampling lottery
                fit, idx = ransac_pnp(
                    survivors, cam, threshold_px=ransac_px,
                    max_iters=ransac_iters, confidence=confidence,
                    rng_seed=derive_seed(rng_seed, f, session, 61),
                    initial_pose=pose,
                )
            except (TooFewMatchesError, NoConsensusError):
                continue
            inliers = [survivors[i] for i in idx]
            prev = None if previous is None else previous.get(f, {}).get(session)
            if prev is not None and np.linalg.norm(fit.t - prev.pose.t) <= snap_m:
                fit = prev.pose
            per_frame[session] = Candidate(f, session, fit, inliers)
        candidates[f] = per_frame

    candidate_sets = [
        (f, [candidates[f][s] for s in sorted(candidates[f])]) for f in frames
    ]
    graph = build_chain(candidate_sets, tracks, cam, edge_px)
    selection = solve_dp(graph)

    priors = {}
    for f in frames:
        ordered = [candidates[f][s] for s in sorted(candidates[f])]
        choice = selection.chosen.get(f)
        if choice is not None and ordered:
            winner = ordered[choice]
            priors[f] = PriorTerm(pose=winner.pose, matches=list(winner.matches))
    problem = build_problem(frames, priors, odometry, tracks, cam, config)
    # seed initialization, not a warm start at `poses`: the E-step scores a
    # prior by how well its matches fit the current estimate, so a frame left
    # at its old pose would immediately write off a relocated prior as an
    # outlier and never move toward it
    new_poses, weights, log = refine(problem, config)
    return PolishResult(new_poses, weights, log, candidates, selection,
                        kept_matches=kept, dropped_matches=dropped)

import os
import sys
import time
from dataclasses import replace

import numpy as np

from locfuse.config import PipelineConfig
from locfuse.consensus import build_chain, solve_dp
from locfuse.errors import NoConsensusError, TooFewMatchesError
from locfuse.localize import Candidate, derive_seed, ransac_pnp
from locfuse.polish import polish
from locfuse.refine import PriorTerm, build_problem, refine
from locfuse.simulate import generate


def localize_stage(sc, cfg):
    cam = cfg.camera()
    candidates = {}
    for k in range(cfg.sim_frames):
        per = {}
        for c in sorted(sc.bundles.get(k, {})):
            matches = sc.bundles[k][c]
            if len(matches) < 4:
                continue
            try:
                pose, idx = ransac_pnp(
                    matches, cam, threshold_px=cfg.ransac_threshold_px,
                    max_iters=cfg.ransac_max_iters,
                    confidence=cfg.ransac_confidence,
                    rng_seed=derive_seed(cfg.seed, k, c, 7),
                )
            except (TooFewMatchesError, NoConsensusError):
                continue
            per[c] = Candidate(k, c, pose, [matches[i] for i in idx])
        candidates[k] = per
    return candidates


def select_priors(candidates, sc, cfg):
    cam = cfg.camera()
    frames = list(range(cfg.sim_frames))
    candidate_sets = [
        (f, [candidates[f][s] for s in sorted(candidates.get(f, {}))])
        for f in frames
    ]
    graph = build_chain(candidate_sets, sc.tracks, cam, cfg.sampson_inlier_threshold)
    sel = solve_dp(graph)
    priors = {}
    for f in frames:
        ordered = [candidates[f][s] for s in sorted(candidates.get(f, {}))]
        ch = sel.chosen.get(f)
        if ch is not None and ordered:
            w = ordered[ch]
            priors[f] = PriorTerm(pose=w.pose, matches=list(w.matches))
    return priors, sel


def recall(poses, true, n, thr):
    ok = sum(
        1 for k in range(n)
        if k in poses and np.linalg.norm(poses[k].t - true[k].t) <= thr
    )
    return ok / n


def run(cfg):
    t0 = time.perf_counter()
    sc = generate(cfg)
    cands = localize_stage(sc, cfg)
    priors, _ = select_priors(cands, sc, cfg)
    cam = cfg.camera()
    frames = list(range(cfg.sim_frames))
    prob = build_problem(frames, priors, sc.odometry, sc.tracks, cam, cfg)
    poses1, w1, log1 = refine(prob, cfg)
    t_r1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = polish(frames, sc.bundles, sc.tracks, sc.odometry, poses1,
                 config=cfg, rng_seed=cfg.seed, previous=cands)
    t_pol = time.perf_counter() - t0
    r1 = recall(poses1, sc.true_poses, cfg.sim_frames, 0.05)
    r2 = recall(res.poses, sc.true_poses, cfg.sim_frames, 0.05)
    return r1, r2, t_r1, t_pol, len(priors), res


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [0, 1]
    summary = {"default": [], "contaminated": []}
    scens = ("default", "contaminated")
    if os.environ.get("ONLY"):
        scens = (os.environ["ONLY"],)
    crate = float(os.environ.get("CRATE", "0.35"))
    for seed in seeds:
        for name in scens:
            cfg = replace(PipelineConfig(), seed=seed)
            if "PTHR" in os.environ:
                cfg = replace(cfg, polish_threshold_px=float(os.environ["PTHR"]))
            if name == "contaminated":
                cfg = replace(cfg, sim_outlier_2d3d_rate=crate)
            r1, r2, t_r1, t_pol, n_pri, res = run(cfg)
            summary[name].append((r1, r2))
            print(f"seed {seed} {name:12s}: refine {r1:.3f} -> polish {r2:.3f} "
                  f"({'+' if r2 >= r1 else ''}{r2 - r1:.3f}) "
                  f"| priors {n_pri} kept {res.kept_matches} dropped {res.dropped_matches} "
                  f"| t {t_r1:.1f}+{t_pol:.1f}s", flush=True)
    nd = sum(r2 >= r1 for r1, r2 in summary["default"])
    si = sum(r2 > r1 for r1, r2 in summary["contaminated"])
    print(f"default non-decrease {nd}/{len(summary['default'])}, "
          f"contaminated strict increase {si}/{len(summary['contaminated'])}")


if __name__ == "__main__":
    main()

"""Diagnose round-2 selection flips: survival counts vs chosen sessions."""
import sys
from dataclasses import replace

import numpy as np

from locfuse.config import PipelineConfig
from locfuse.polish import guided_prune, polish
from locfuse.refine import build_problem, refine
from locfuse.simulate import generate

from probe_c8 import localize_stage, select_priors, recall


def err(pose, true_pose):
    return float(np.linalg.norm(pose.t - true_pose.t))


def main():
    seed = int(sys.argv[1])
    scen = sys.argv[2] if len(sys.argv) > 2 else "default"
    cfg = replace(PipelineConfig(), seed=seed)
    if scen == "contaminated":
        cfg = replace(cfg, sim_outlier_2d3d_rate=0.35)
    sc = generate(cfg)
    cam = cfg.camera()
    frames = list(range(cfg.sim_frames))

    cands = localize_stage(sc, cfg)
    priors, sel1 = select_priors(cands, sc, cfg)
    prob = build_problem(frames, priors, sc.odometry, sc.tracks, cam, cfg)
    poses1, _, _ = refine(prob, cfg)
    res = polish(frames, sc.bundles, sc.tracks, sc.odometry, poses1,
                 config=cfg, rng_seed=cfg.seed)

    # survivors per (frame, session) at the refined pose
    surv = {}
    for f in frames:
        for s, m in sc.bundles.get(f, {}).items():
            if f in poses1:
                surv[(f, s)] = len(guided_prune(poses1[f], m, cam,
                                                cfg.polish_threshold_px))

    flips = wins_small = 0
    lost = []
    for f in frames:
        e1 = err(poses1[f], sc.true_poses[f])
        e2 = err(res.poses[f], sc.true_poses[f])
        s1 = sorted(cands.get(f, {}))
        s2 = sorted(res.candidates.get(f, {}))
        c1 = sel1.chosen.get(f)
        c2 = res.selection.chosen.get(f)
        sess1 = s1[c1] if c1 is not None and s1 else None
        sess2 = s2[c2] if c2 is not None and s2 else None
        if sess1 != sess2:
            flips += 1
            n2 = surv.get((f, sess2), 0)
            nbest = max((surv.get((f, s), 0) for s in s2), default=0)
            if n2 < nbest:
                wins_small += 1
        if e1 <= 0.05 < e2:
            lost.append((f, sess1, sess2, e1, e2))

    print(f"seed {seed} {scen}: flips={flips}  flipped-to-smaller-survival={wins_small}")
    print(f"lost frames ({len(lost)}):")
    for f, sess1, sess2, e1, e2 in lost:
        s2 = sorted(res.candidates.get(f, {}))
        parts = []
        for s in s2:
            n = surv.get((f, s), 0)
            tot = len(sc.bundles.get(f, {}).get(s, []))
            pe = err(res.candidates[f][s].pose, sc.true_poses[f])
            mark = "*" if s == sess2 else (" " if s != sess1 else "<")
            parts.append(f"s{s}{mark} surv {n}/{tot} err {pe:.3f}")
        print(f"  f{f:3d} sel {sess1}->{sess2} traj {e1:.3f}->{e2:.3f} | "
              + " | ".join(parts))

    # counterfactual filters: would they have prevented flipped-to choices?
    for name, keepfn in [
        ("abs>=8", lambda f, s: surv.get((f, s), 0) >= 8),
        ("frac>=0.5", lambda f, s: surv.get((f, s), 0)
         >= 0.5 * len(sc.bundles.get(f, {}).get(s, []) or [1])),
        ("rel>=0.6max", lambda f, s: surv.get((f, s), 0) >= 0.6 * max(
            (surv.get((f, t), 0) for t in res.candidates.get(f, {})), default=1)),
    ]:
        blocked = kept_good = 0
        for f, sess1, sess2, e1, e2 in lost:
            if sess2 is not None and not keepfn(f, sess2):
                blocked += 1
            if sess1 is not None and keepfn(f, sess1):
                kept_good += 1
        print(f"filter {name:12s}: blocks {blocked}/{len(lost)} flipped-to, "
              f"keeps {kept_good}/{len(lost)} round-1 choices")


if __name__ == "__main__":
    main()

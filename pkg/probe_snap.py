"""Measure how far round-2 refits land from round-1 candidates per scenario."""
import sys
from dataclasses import replace

import numpy as np

from locfuse.config import PipelineConfig
from locfuse.polish import polish
from locfuse.refine import build_problem, refine
from locfuse.simulate import generate

from probe_c8 import localize_stage, select_priors


def main():
    for seed in [int(s) for s in sys.argv[1:]] or [0, 6]:
        for scen in ("default", "contaminated"):
            cfg = replace(PipelineConfig(), seed=seed)
            if scen == "contaminated":
                cfg = replace(cfg, sim_outlier_2d3d_rate=0.35)
            sc = generate(cfg)
            frames = list(range(cfg.sim_frames))
            cands = localize_stage(sc, cfg)
            priors, _ = select_priors(cands, sc, cfg)
            prob = build_problem(frames, priors, sc.odometry, sc.tracks,
                                 cfg.camera(), cfg)
            poses1, _, _ = refine(prob, cfg)
            res = polish(frames, sc.bundles, sc.tracks, sc.odometry, poses1,
                         config=cfg, rng_seed=cfg.seed)
            d = []
            for f in frames:
                for s, cand2 in res.candidates.get(f, {}).items():
                    c1 = cands.get(f, {}).get(s)
                    if c1 is not None:
                        d.append(np.linalg.norm(cand2.pose.t - c1.pose.t))
            d = np.array(d)
            qs = np.percentile(d, [25, 50, 75, 90, 95, 99])
            print(f"seed {seed} {scen:12s}: n={len(d)} "
                  + " ".join(f"p{p}={v:.4f}" for p, v in
                             zip([25, 50, 75, 90, 95, 99], qs))
                  + f"  frac<1cm={np.mean(d < 0.01):.2f}"
                  + f"  frac<2cm={np.mean(d < 0.02):.2f}"
                  + f"  frac>5cm={np.mean(d > 0.05):.2f}")


if __name__ == "__main__":
    main()

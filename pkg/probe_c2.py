"""Consensus selection vs naive 2D-3D merge on the biased-session scenario."""
import sys
import time
from dataclasses import replace

import numpy as np

from locfuse.config import PipelineConfig
from locfuse.consensus import build_chain, solve_dp
from locfuse.errors import NoConsensusError, TooFewMatchesError
from locfuse.localize import Candidate, derive_seed, localize_frame_merged, ransac_pnp
from locfuse.simulate import scenario_incompatible_sessions


def recall(poses, true, n, thr):
    ok = sum(
        1 for k in range(n)
        if k in poses and np.linalg.norm(poses[k].t - true[k].t) <= thr
    )
    return ok / n


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [0, 1]
    wins = 0
    t_all = time.perf_counter()
    for seed in seeds:
        t0 = time.perf_counter()
        cfg = replace(PipelineConfig(), seed=seed, sim_frames=500)
        sc = scenario_incompatible_sessions(cfg, bias_m=0.5)
        cam = cfg.camera()
        frames = list(range(cfg.sim_frames))

        cands = {}
        for f in frames:
            per = {}
            for c, matches in sorted(sc.bundles.get(f, {}).items()):
                if len(matches) < 4:
                    continue
                try:
                    pose, idx = ransac_pnp(
                        matches, cam, threshold_px=cfg.ransac_threshold_px,
                        max_iters=cfg.ransac_max_iters,
                        confidence=cfg.ransac_confidence,
                        rng_seed=derive_seed(cfg.seed, f, c, 7))
                except (TooFewMatchesError, NoConsensusError):
                    continue
                per[c] = Candidate(f, c, pose, [matches[i] for i in idx])
            cands[f] = per

        candidate_sets = [
            (f, [cands[f][c] for c in sorted(cands.get(f, {}))]) for f in frames
        ]
        graph = build_chain(candidate_sets, sc.tracks, cam,
                            cfg.sampson_inlier_threshold)
        sel = solve_dp(graph)
        chosen = {}
        for f in frames:
            ordered = [cands[f][c] for c in sorted(cands.get(f, {}))]
            ch = sel.chosen.get(f)
            if ch is not None and ordered:
                chosen[f] = ordered[ch].pose

        merged = {}
        for f in frames:
            try:
                pose, _ = localize_frame_merged(
                    f, sc.bundles.get(f, {}), cam,
                    threshold_px=cfg.ransac_threshold_px,
                    max_iters=cfg.ransac_max_iters,
                    confidence=cfg.ransac_confidence,
                    dedupe_radius_px=cfg.dedupe_radius_px,
                    rng_seed=cfg.seed)
            except (TooFewMatchesError, NoConsensusError):
                continue
            merged[f] = pose

        r_cons = recall(chosen, sc.true_poses, cfg.sim_frames, 0.1)
        r_merge = recall(merged, sc.true_poses, cfg.sim_frames, 0.1)
        wins += r_cons > r_merge
        print(f"seed {seed}: consensus {r_cons:.3f} vs merged {r_merge:.3f} "
              f"({'WIN' if r_cons > r_merge else 'loss'}) "
              f"t {time.perf_counter()-t0:.1f}s", flush=True)
    print(f"consensus wins {wins}/{len(seeds)}; "
          f"total {time.perf_counter()-t_all:.1f}s")


if __name__ == "__main__":
    main()

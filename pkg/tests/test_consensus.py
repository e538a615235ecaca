"""Chain-graph scoring and solver checks.

The dynamic-programming solver is validated three ways: pinned hand-worked
instances, a brute-force path enumerator written here, and the in-package
branch-and-bound reference. Edge scores are checked against the scalar
Sampson oracle from helpers.
"""

import numpy as np
import pytest

from locfuse.consensus import (
    ChainGraph,
    Selection,
    build_chain,
    edge_score,
    solve_dp,
    solve_ilp_oracle,
)
from locfuse.errors import EmptySequenceError, OracleScaleError
from locfuse.geometry import Pose, fundamental_from_poses, project
from locfuse.matches import MatchSet2D2D

from helpers import CAM, random_pose, rng_for, sampson_oracle


def _two_view_scene(rng, n=60, baseline=1.2):
    """True pose pair plus exactly-consistent pixel tracks."""
    pose_a = random_pose(rng, t_scale=3.0, angle_scale=0.2)
    step = rng.normal(size=3)
    step = baseline * step / np.linalg.norm(step)
    pose_b = Pose(pose_a.q, pose_a.t + pose_a.R @ (step * [1, 1, 0.2] + [0, 0, baseline]))
    uv_a = np.empty((n, 2))
    uv_b = np.empty((n, 2))
    kept = 0
    while kept < n:
        px = rng.uniform([20, 20], [620, 460])
        depth = rng.uniform(8.0, 30.0)
        ray = np.array([(px[0] - CAM.cx) / CAM.fx, (px[1] - CAM.cy) / CAM.fy, 1.0])
        world = pose_a.R @ (depth * ray) + pose_a.t
        try:
            q = project(pose_b, CAM, world)
        except Exception:
            continue
        if not (0 <= q[0] < 640 and 0 <= q[1] < 480):
            continue
        uv_a[kept] = px
        uv_b[kept] = q
        kept += 1
    return pose_a, pose_b, MatchSet2D2D(0, 1, uv_a, uv_b)


def _random_graph(rng, max_k=10, max_c=3, full_frames=None):
    k = full_frames or int(rng.integers(2, max_k + 1))
    counts = [int(rng.integers(1, max_c + 1)) for _ in range(k)]
    frames = list(range(k))
    nodes = {f: [None] * counts[f] for f in frames}
    edges = [
        rng.integers(0, 101, size=(counts[p], counts[p + 1]))
        for p in range(k - 1)
    ]
    return ChainGraph(frames, nodes, frames, edges)


def _brute_force_best(graph):
    """Enumerate every path through the trellis; returns the best total."""
    counts = [len(graph.nodes[f]) for f in graph.layers]
    best = -1
    stack = [([i], 0) for i in range(counts[0])]
    while stack:
        path, total = stack.pop()
        p = len(path) - 1
        if p == len(counts) - 1:
            best = max(best, total)
            continue
        for j in range(counts[p + 1]):
            stack.append((path + [j], total + int(graph.edges[p][path[-1], j])))
    return best


class TestEdgeScore:
    def test_noiseless_tracks_all_count(self):
        for seed in range(5):
            rng = rng_for(400 + seed)
            pose_a, pose_b, track = _two_view_scene(rng)
            assert edge_score(pose_a, pose_b, track, CAM, 4.0) == len(track)

    def test_displaced_pose_scores_poorly(self):
        rng = rng_for(410)
        pose_a, pose_b, track = _two_view_scene(rng)
        off = Pose(pose_b.q, pose_b.t + pose_b.R @ np.array([5.0, 0.0, 0.0]))
        assert edge_score(pose_a, off, track, CAM, 4.0) < 0.2 * len(track)

    def test_empty_track_and_degenerate_baseline(self):
        rng = rng_for(420)
        pose_a, pose_b, track = _two_view_scene(rng)
        empty = MatchSet2D2D(0, 1, np.zeros((0, 2)), np.zeros((0, 2)))
        assert edge_score(pose_a, pose_b, empty, CAM, 4.0) == 0
        assert edge_score(pose_a, pose_a, track, CAM, 4.0) == 0

    def test_matches_independent_sampson_count(self):
        for seed in range(100):
            rng = rng_for(430 + seed)
            pose_a, pose_b, track = _two_view_scene(rng, n=25)
            # corrupt a few correspondences so both sides of the threshold occur
            uv_b = track.uv_b.copy()
            bad = rng.integers(0, 25, size=6)
            uv_b[bad] += rng.normal(0.0, 15.0, size=(6, 2))
            track = MatchSet2D2D(0, 1, track.uv_a, uv_b)
            thr = float(rng.uniform(0.5, 8.0))
            F = fundamental_from_poses(pose_a, pose_b, CAM, CAM)
            expected = sum(
                sampson_oracle(F, track.uv_a[i], track.uv_b[i]) <= thr
                for i in range(len(track))
            )
            assert edge_score(pose_a, pose_b, track, CAM, thr) == expected


class _Stub:
    def __init__(self, pose):
        self.pose = pose


class TestBuildChain:
    def _candidate_sets(self, rng, per_frame):
        sets = []
        tracks = []
        poses = {}
        for f, n in enumerate(per_frame):
            poses[f] = random_pose(rng, t_scale=2.0, angle_scale=0.1)
            sets.append((f, [_Stub(poses[f]) for _ in range(n)]))
        return sets, poses

    def test_edge_count_two_frames(self):
        rng = rng_for(440)
        pose_a, pose_b, track = _two_view_scene(rng)
        sets = [(0, [_Stub(pose_a), _Stub(pose_a)]), (1, [_Stub(pose_b), _Stub(pose_b)])]
        g = build_chain(sets, [track], CAM)
        assert len(g.edges) == 1 and g.edges[0].shape == (2, 2)
        assert g.edges[0].size == 4

    def test_missing_session_shrinks_matrix(self):
        rng = rng_for(441)
        pose_a, pose_b, track = _two_view_scene(rng)
        sets = [(0, [_Stub(pose_a), _Stub(pose_a)]), (1, [_Stub(pose_b)])]
        g = build_chain(sets, [track], CAM)
        assert g.edges[0].shape == (2, 1)

    def test_zero_candidate_frame_bridged_with_skip_track(self):
        rng = rng_for(442)
        pose_a, pose_b, track = _two_view_scene(rng)
        track = MatchSet2D2D(0, 2, track.uv_a, track.uv_b)  # skip pair 0-2
        sets = [(0, [_Stub(pose_a)]), (1, []), (2, [_Stub(pose_b)])]
        g = build_chain(sets, [track], CAM)
        assert g.layers == [0, 2]
        assert g.edges[0][0, 0] == len(track)
        sel = solve_dp(g)
        assert sel.chosen == {0: 0, 1: None, 2: 0}

    def test_zero_candidate_frame_without_skip_track_is_placeholder(self):
        rng = rng_for(443)
        pose_a, pose_b, _ = _two_view_scene(rng)
        sets = [(0, [_Stub(pose_a)]), (1, []), (2, [_Stub(pose_b)])]
        g = build_chain(sets, [], CAM)
        assert g.layers == [0, 2]
        assert g.edges[0][0, 0] == 0

    def test_empty_inputs_raise(self):
        with pytest.raises(EmptySequenceError):
            build_chain([], [], CAM)
        with pytest.raises(EmptySequenceError):
            build_chain([(0, []), (1, [])], [], CAM)


class TestSolveDP:
    def test_pinned_two_frame(self):
        g = ChainGraph([0, 1], {0: [None] * 2, 1: [None] * 2}, [0, 1],
                       [np.array([[5, 1], [2, 3]])])
        sel = solve_dp(g)
        assert sel.total_score == 5
        assert sel.chosen == {0: 0, 1: 0}

    def test_pinned_three_frame(self):
        g = ChainGraph(
            [0, 1, 2], {0: [None] * 2, 1: [None] * 2, 2: [None] * 2}, [0, 1, 2],
            [np.array([[1, 4], [2, 1]]), np.array([[3, 0], [0, 6]])],
        )
        sel = solve_dp(g)
        assert sel.total_score == 10
        assert sel.chosen == {0: 0, 1: 1, 2: 1}
        assert sel.total_score == _brute_force_best(g)

    def test_all_equal_scores_lowest_index_path(self):
        g = ChainGraph(
            [0, 1, 2], {f: [None] * 3 for f in range(3)}, [0, 1, 2],
            [np.full((3, 3), 7), np.full((3, 3), 7)],
        )
        sel = solve_dp(g)
        assert sel.chosen == {0: 0, 1: 0, 2: 0}

    def test_single_frame(self):
        g = ChainGraph([0], {0: [None] * 3}, [0], [])
        sel = solve_dp(g)
        assert sel.chosen == {0: 0}
        assert sel.total_score == 0

    def test_matches_brute_force(self):
        for seed in range(120):
            g = _random_graph(rng_for(450 + seed), max_k=7, max_c=3)
            assert solve_dp(g).total_score == _brute_force_best(g)

    def test_frame_scores_sum_to_total(self):
        for seed in range(20):
            g = _random_graph(rng_for(470 + seed))
            sel = solve_dp(g)
            assert sum(sel.frame_scores.values()) == sel.total_score


class TestOracle:
    def test_agrees_with_dp(self):
        for seed in range(150):
            g = _random_graph(rng_for(500 + seed))
            assert solve_ilp_oracle(g).total_score == solve_dp(g).total_score

    def test_single_frame_convention(self):
        g = ChainGraph([0], {0: [None] * 2}, [0], [])
        sel = solve_ilp_oracle(g)
        assert sel.chosen == {0: 0}
        assert sel.total_score == 0

    def test_scale_cap(self):
        g = _random_graph(rng_for(520), full_frames=13)
        with pytest.raises(OracleScaleError):
            solve_ilp_oracle(g)
        rng = rng_for(521)
        nodes = {f: [None] * 5 for f in range(3)}
        g = ChainGraph(list(range(3)), nodes, list(range(3)),
                       [rng.integers(0, 10, size=(5, 5)) for _ in range(2)])
        with pytest.raises(OracleScaleError):
            solve_ilp_oracle(g)


class TestMonotonicity:
    def test_raising_on_path_edge_keeps_selection(self):
        for seed in range(30):
            g = _random_graph(rng_for(540 + seed))
            sel = solve_dp(g)
            idx = [sel.chosen[f] for f in g.layers]
            for p in range(len(g.edges)):
                g.edges[p] = g.edges[p].copy()
                g.edges[p][idx[p], idx[p + 1]] += 50
            again = solve_dp(g)
            assert [again.chosen[f] for f in g.layers] == idx

    def test_raising_off_path_edge_above_margin_switches(self):
        for seed in range(30):
            g = _random_graph(rng_for(570 + seed), max_k=6)
            sel = solve_dp(g)
            idx = [sel.chosen[f] for f in g.layers]
            # find an edge not on the optimal path, if the graph has one
            target = None
            for p, S in enumerate(g.edges):
                for i in range(S.shape[0]):
                    for j in range(S.shape[1]):
                        if (i, j) != (idx[p], idx[p + 1]):
                            target = (p, i, j)
                            break
                    if target:
                        break
                if target:
                    break
            if target is None:
                continue
            p, i, j = target
            g.edges[p] = g.edges[p].copy()
            g.edges[p][i, j] += sel.total_score + 1  # exceeds any margin
            again = solve_dp(g)
            assert again.chosen[g.layers[p]] == i
            assert again.chosen[g.layers[p + 1]] == j

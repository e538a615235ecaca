"""Cross-session candidate selection along the frame chain.

Each query frame carries up to one pose candidate per session map. Pairs of
candidates at consecutive frames are scored by how many tracked 2D-2D
matches are consistent (small Sampson error) with the epipolar geometry the
two poses imply; picking exactly one candidate per frame to maximize the
total score is a 0-1 program whose constraint structure is a chain, so the
exact optimum falls out of a forward dynamic program over the trellis. A
branch-and-bound solver over the raw edge variables is kept alongside as an
independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBaselineError, EmptySequenceError, OracleScaleError
from .geometry import CameraIntrinsics, Pose, fundamental_from_poses, sampson_errors

# branch-and-bound reference solver scale cap
ORACLE_MAX_FRAMES = 12
ORACLE_MAX_CANDIDATES = 4


@dataclass
class ChainGraph:
    """Trellis of per-frame candidates with integer pair scores.

    `frames` lists every query frame in order; `nodes` maps each frame to its
    candidate list (possibly empty). `layers` are the frames that actually
    hold candidates — zero-candidate frames are bridged, so consecutive
    layers may be more than one frame apart. `edges[p]` scores layer p
    against layer p+1 with a (C_p, C_{p+1}) array of inlier counts.
    """

    frames: list
    nodes: dict
    layers: list
    edges: list
    degenerate_edges: set = field(default_factory=set)  # (pair_idx, i, j)

    def validate(self) -> "ChainGraph":
        if not self.layers:
            raise EmptySequenceError("chain graph has no frames with candidates")
        counts = [len(self.nodes[f]) for f in self.layers]
        if min(counts) < 1:
            raise EmptySequenceError("layer without candidates")
        if len(self.edges) != len(self.layers) - 1:
            raise ValueError("edge list length must be layer count minus one")
        for p, S in enumerate(self.edges):
            S = np.asarray(S)
            if S.shape != (counts[p], counts[p + 1]):
                raise ValueError(f"edge matrix {p} has shape {S.shape}, "
                                 f"expected {(counts[p], counts[p + 1])}")
            if np.any(S < 0):
                raise ValueError("edge scores must be nonnegative")
        return self


@dataclass
class Selection:
    """One chosen candidate index per frame (None where a frame had none)."""

    chosen: dict  # frame_id -> candidate index or None
    frame_scores: dict  # frame_id -> score of the selected incoming edge
    total_score: int


def _edge_score(pose_a, pose_b, track, cam, threshold):
    """(inlier count, degenerate flag) for one candidate pose pair."""
    if track is None or len(track) == 0:
        return 0, False
    try:
        F = fundamental_from_poses(pose_a, pose_b, cam, cam)
    except DegenerateBaselineError:
        return 0, True
    errs = sampson_errors(F, track.uv_a, track.uv_b)
    return int(np.count_nonzero(errs <= threshold)), False


def edge_score(
    pose_a: Pose,
    pose_b: Pose,
    matches,
    cam: CameraIntrinsics,
    sampson_threshold: float = 4.0,
) -> int:
    """Number of tracked matches within the Sampson threshold under the
    fundamental matrix implied by the two poses.

    A near-zero baseline (stationary vehicle) defines no epipolar geometry;
    such pairs score 0 rather than attempting a homography test.
    """
    score, _ = _edge_score(pose_a, pose_b, matches, cam, sampson_threshold)
    return score


def build_chain(candidate_sets, tracks, cam: CameraIntrinsics,
                sampson_threshold: float = 4.0) -> ChainGraph:
    """Score every candidate pair of adjacent layers into a ChainGraph.

    `candidate_sets` is an ordered list of (frame_id, candidates) pairs; a
    frame with an empty candidate list is bridged: its neighbors are scored
    directly against each other using the matching longer-gap track set when
    one exists, and with an all-zero placeholder otherwise, so the chain
    never fragments. `tracks` is any iterable of MatchSet2D2D (consecutive
    and skip pairs alike); lookup is by (frame_a, frame_b).
    """
    candidate_sets = list(candidate_sets)
    if not candidate_sets:
        raise EmptySequenceError("no frames given")
    frames = [f for f, _ in candidate_sets]
    nodes = {f: list(cands) for f, cands in candidate_sets}
    layers = [f for f in frames if nodes[f]]
    if not layers:
        raise EmptySequenceError("no frame has any candidate")

    track_index = {(t.frame_a, t.frame_b): t for t in tracks}
    edges = []
    degenerate = set()
    for p in range(len(layers) - 1):
        fa, fb = layers[p], layers[p + 1]
        track = track_index.get((fa, fb))
        S = np.zeros((len(nodes[fa]), len(nodes[fb])), dtype=int)
        if track is not None and len(track):
            for i, ca in enumerate(nodes[fa]):
                for j, cb in enumerate(nodes[fb]):
                    s, flag = _edge_score(ca.pose, cb.pose, track, cam, sampson_threshold)
                    S[i, j] = s
                    if flag:
                        degenerate.add((p, i, j))
        edges.append(S)
    return ChainGraph(frames, nodes, layers, edges, degenerate).validate()


def solve_dp(graph: ChainGraph) -> Selection:
    """Exact maximum-score selection by forward dynamic programming.

    The chain constraints make the 0-1 edge program equivalent to a best
    path through the trellis; ties are broken toward the lowest candidate
    index at every step, so the result is deterministic.
    """
    graph.validate()
    best = np.zeros(len(graph.nodes[graph.layers[0]]))
    back = []
    for S in graph.edges:
        totals = best[:, None] + S
        back.append(np.argmax(totals, axis=0))  # first max = lowest index
        best = np.max(totals, axis=0)
    idx = [int(np.argmax(best))]
    for bp in reversed(back):
        idx.append(int(bp[idx[-1]]))
    idx.reverse()

    chosen = {f: None for f in graph.frames}
    scores = {f: 0 for f in graph.frames}
    for p, f in enumerate(graph.layers):
        chosen[f] = idx[p]
        if p > 0:
            scores[f] = int(graph.edges[p - 1][idx[p - 1], idx[p]])
    return Selection(chosen, scores, int(best[idx[-1]]) if graph.edges else 0)


def solve_ilp_oracle(graph: ChainGraph) -> Selection:
    """Reference solver: branch and bound over the 0-1 edge variables.

    One binary variable per candidate pair of adjacent layers; exactly one
    edge is active per layer pair, and flow consistency (an active edge into
    a node forces the outgoing active edge to leave the same node) is
    enforced by propagation during the search. A running upper bound from
    per-layer maxima prunes hopeless branches. Exponential in the worst
    case, hence the scale cap; selections may differ from solve_dp on ties
    but the objective value never does.
    """
    graph.validate()
    layers = graph.layers
    counts = [len(graph.nodes[f]) for f in layers]
    if len(layers) > ORACLE_MAX_FRAMES or max(counts) > ORACLE_MAX_CANDIDATES:
        raise OracleScaleError(
            f"{len(layers)} layers / {max(counts)} candidates exceeds the "
            f"reference solver cap ({ORACLE_MAX_FRAMES}/{ORACLE_MAX_CANDIDATES})"
        )

    n_pairs = len(graph.edges)
    if n_pairs == 0:
        chosen = {f: None for f in graph.frames}
        chosen[layers[0]] = 0
        return Selection(chosen, {f: 0 for f in graph.frames}, 0)

    edges = [np.asarray(S) for S in graph.edges]
    # bound: best possible score from pair p onward
    suffix = np.zeros(n_pairs + 1)
    for p in range(n_pairs - 1, -1, -1):
        suffix[p] = suffix[p + 1] + edges[p].max()

    best_total = -1
    best_path = None

    def descend(p, tail, total, path):
        nonlocal best_total, best_path
        if p == n_pairs:
            if total > best_total:
                best_total = total
                best_path = list(path)
            return
        if total + suffix[p] <= best_total:
            return
        row = edges[p][tail]
        for j in np.argsort(-row, kind="stable"):
            path.append(int(j))
            descend(p + 1, int(j), total + int(row[j]), path)
            path.pop()

    # the first layer pair branches over both endpoints; later pairs have
    # their source pinned by flow consistency
    first = edges[0]
    order = np.dstack(np.unravel_index(np.argsort(-first, axis=None, kind="stable"),
                                       first.shape))[0]
    for i, j in order:
        if first[i, j] + suffix[1] <= best_total:
            break
        path = [int(i), int(j)]
        descend(1, int(j), int(first[i, j]), path)

    chosen = {f: None for f in graph.frames}
    scores = {f: 0 for f in graph.frames}
    for p, f in enumerate(layers):
        chosen[f] = best_path[p]
        if p > 0:
            scores[f] = int(edges[p - 1][best_path[p - 1], best_path[p]])
    return Selection(chosen, scores, int(best_total))

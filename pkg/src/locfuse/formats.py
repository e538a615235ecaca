"""Line-oriented text serialization for every pipeline artifact.

All formats are whitespace-delimited UTF-8 with `#` comments, floats written
with 17 significant digits so write-then-read round-trips are exact. Poses
are world-from-camera with scalar-last quaternions throughout.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FileFormatError
from .geometry import Pose
from .localize import Candidate
from .mapping import MapFrame, MapPoint, SessionMap
from .matches import Match2D3D, MatchSet2D2D

FLOAT_FMT = "%.17g"


def _fmt(values) -> str:
    return " ".join(FLOAT_FMT % float(v) for v in values)


def _lines(path):
    """Yield (line_no, tokens) for content lines; comments and blanks skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            stripped = raw.split("#", 1)[0].strip()
            if stripped:
                yield line_no, stripped.split()


def _floats(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise FileFormatError(path, line_no, f"expected a number: {exc}") from None


def _ints(tokens, path, line_no):
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise FileFormatError(path, line_no, f"expected an integer: {exc}") from None


def _need(tokens, count, path, line_no, what):
    if len(tokens) != count:
        raise FileFormatError(
            path, line_no, f"{what}: expected {count} fields, got {len(tokens)}"
        )


def _pose_fields(pose: Pose):
    return list(pose.t) + list(pose.q)


def _pose_from(vals):
    return Pose(np.array(vals[3:7]), np.array(vals[0:3]))


# --- trajectories -----------------------------------------------------------

def write_trajectory(path, poses: dict):
    """`timestamp tx ty tz qx qy qz qw` per frame; frame ids double as
    timestamps here."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for frame_id in sorted(poses):
            fh.write(_fmt([float(frame_id)] + _pose_fields(poses[frame_id])) + "\n")


def read_trajectory(path) -> dict:
    poses = {}
    for line_no, tokens in _lines(path):
        _need(tokens, 8, path, line_no, "trajectory line")
        vals = _floats(tokens, path, line_no)
        poses[int(round(vals[0]))] = _pose_from(vals[1:])
    return poses


# --- odometry ---------------------------------------------------------------

def write_odometry(path, entries):
    """Relative poses: `frame_a frame_b tx ty tz qx qy qz qw`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame_a frame_b tx ty tz qx qy qz qw\n")
        for frame_a, frame_b, rel in entries:
            fh.write(f"{frame_a} {frame_b} " + _fmt(_pose_fields(rel)) + "\n")


def read_odometry(path):
    entries = []
    for line_no, tokens in _lines(path):
        _need(tokens, 9, path, line_no, "odometry line")
        a, b = _ints(tokens[:2], path, line_no)
        vals = _floats(tokens[2:], path, line_no)
        entries.append((a, b, _pose_from(vals)))
    return entries


# --- 2D-2D tracks -----------------------------------------------------------

def write_tracks(path, match_sets):
    """`frame_a frame_b u1 v1 u2 v2` per correspondence."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame_a frame_b u1 v1 u2 v2\n")
        for ms in match_sets:
            for (u1, v1), (u2, v2) in zip(ms.uv_a, ms.uv_b):
                fh.write(f"{ms.frame_a} {ms.frame_b} " + _fmt([u1, v1, u2, v2]) + "\n")


def read_tracks(path):
    """Group correspondence lines back into MatchSet2D2D, first-seen order."""
    grouped = {}
    order = []
    for line_no, tokens in _lines(path):
        _need(tokens, 6, path, line_no, "track line")
        a, b = _ints(tokens[:2], path, line_no)
        vals = _floats(tokens[2:], path, line_no)
        key = (a, b)
        if key not in grouped:
            grouped[key] = ([], [])
            order.append(key)
        grouped[key][0].append(vals[0:2])
        grouped[key][1].append(vals[2:4])
    return [
        MatchSet2D2D(a, b, np.array(grouped[(a, b)][0]), np.array(grouped[(a, b)][1]))
        for a, b in order
    ]


# --- session maps -----------------------------------------------------------

def write_session_map(path, session_map: SessionMap):
    """`FRAME id ts tx ty tz qx qy qz qw` then
    `POINT id X Y Z nobs frame_id u v ...`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# session {session_map.session_id}\n")
        for f in session_map.frames:
            fh.write(
                f"FRAME {f.frame_id} " + _fmt([f.timestamp] + _pose_fields(f.pose)) + "\n"
            )
        for p in session_map.points:
            obs = []
            for frame_id, uv in p.observations:
                obs.append(str(frame_id))
                obs.append(FLOAT_FMT % uv[0])
                obs.append(FLOAT_FMT % uv[1])
            fh.write(
                f"POINT {p.point_id} " + _fmt(p.position)
                + f" {len(p.observations)} " + " ".join(obs) + "\n"
            )


def read_session_map(path, session_id: int) -> SessionMap:
    frames, points = [], []
    for line_no, tokens in _lines(path):
        kind, rest = tokens[0], tokens[1:]
        if kind == "FRAME":
            _need(rest, 9, path, line_no, "FRAME record")
            fid = _ints(rest[:1], path, line_no)[0]
            vals = _floats(rest[1:], path, line_no)
            frames.append(MapFrame(fid, vals[0], _pose_from(vals[1:])))
        elif kind == "POINT":
            if len(rest) < 5:
                raise FileFormatError(path, line_no, "POINT record too short")
            pid = _ints(rest[:1], path, line_no)[0]
            xyz = _floats(rest[1:4], path, line_no)
            nobs = _ints(rest[4:5], path, line_no)[0]
            _need(rest, 5 + 3 * nobs, path, line_no, "POINT record")
            obs = []
            for j in range(nobs):
                fid = _ints(rest[5 + 3 * j : 6 + 3 * j], path, line_no)[0]
                uv = _floats(rest[6 + 3 * j : 8 + 3 * j], path, line_no)
                obs.append((fid, np.array(uv)))
            points.append(MapPoint(pid, np.array(xyz), obs))
        else:
            raise FileFormatError(path, line_no, f"unknown map record {kind!r}")
    return SessionMap(session_id, frames, points)


# --- candidates -------------------------------------------------------------

def write_candidates(path, candidates_by_frame: dict):
    """`CAND frame session tx ty tz qx qy qz qw n_inliers` followed by one
    `M2D3D u v X Y Z` line per stored inlier match."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# CAND frame session tx ty tz qx qy qz qw n_inliers\n")
        for frame_id in sorted(candidates_by_frame):
            for cand in candidates_by_frame[frame_id]:
                fh.write(
                    f"CAND {cand.frame_id} {cand.session_id} "
                    + _fmt(_pose_fields(cand.pose))
                    + f" {cand.inlier_count}\n"
                )
                for m in cand.matches:
                    fh.write("M2D3D " + _fmt(list(m.query) + list(m.world)) + "\n")


def read_candidates(path) -> dict:
    out = {}
    current = None
    expect = 0
    for line_no, tokens in _lines(path):
        kind, rest = tokens[0], tokens[1:]
        if kind == "CAND":
            if expect:
                raise FileFormatError(
                    path, line_no, f"previous candidate short {expect} M2D3D lines"
                )
            _need(rest, 10, path, line_no, "CAND record")
            frame_id, session_id = _ints(rest[:2], path, line_no)
            vals = _floats(rest[2:9], path, line_no)
            expect = _ints(rest[9:], path, line_no)[0]
            current = Candidate(frame_id, session_id, _pose_from(vals), [])
            out.setdefault(frame_id, []).append(current)
        elif kind == "M2D3D":
            if current is None or expect == 0:
                raise FileFormatError(path, line_no, "M2D3D outside a CAND block")
            _need(rest, 5, path, line_no, "M2D3D record")
            vals = _floats(rest, path, line_no)
            current.matches.append(
                Match2D3D(np.array(vals[:2]), np.array(vals[2:]), session_id=current.session_id)
            )
            expect -= 1
        else:
            raise FileFormatError(path, line_no, f"unknown candidate record {kind!r}")
    if expect:
        raise FileFormatError(path, 0, f"file ends inside a candidate block ({expect} missing)")
    return out


# --- raw 2D-3D observations -------------------------------------------------

def write_observations(path, bundles: dict):
    """Pre-localization matches: `OBS frame session source u v X Y Z`.

    bundles maps frame_id -> session_id -> list of Match2D3D.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# OBS frame session source u v X Y Z\n")
        for frame_id in sorted(bundles):
            for session_id in sorted(bundles[frame_id]):
                for m in bundles[frame_id][session_id]:
                    fh.write(
                        f"OBS {frame_id} {session_id} {m.source} "
                        + _fmt(list(m.query) + list(m.world)) + "\n"
                    )


def read_observations(path) -> dict:
    bundles = {}
    for line_no, tokens in _lines(path):
        if tokens[0] != "OBS":
            raise FileFormatError(path, line_no, f"unknown observation record {tokens[0]!r}")
        rest = tokens[1:]
        _need(rest, 8, path, line_no, "OBS record")
        frame_id, session_id = _ints(rest[:2], path, line_no)
        source = rest[2]
        vals = _floats(rest[3:], path, line_no)
        bundles.setdefault(frame_id, {}).setdefault(session_id, []).append(
            Match2D3D(np.array(vals[:2]), np.array(vals[2:]), source=source, session_id=session_id)
        )
    return bundles


# --- consensus selection ----------------------------------------------------

def write_selection(path, rows):
    """`SEL frame_id session_id edge_score`; session -1 marks frames where
    every session failed."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# SEL frame session score\n")
        for frame_id, session_id, score in rows:
            sid = -1 if session_id is None else session_id
            fh.write(f"SEL {frame_id} {sid} {score}\n")


def read_selection(path):
    rows = []
    for line_no, tokens in _lines(path):
        if tokens[0] != "SEL":
            raise FileFormatError(path, line_no, f"unknown selection record {tokens[0]!r}")
        _need(tokens[1:], 3, path, line_no, "SEL record")
        frame_id, sid, score = _ints(tokens[1:], path, line_no)
        rows.append((frame_id, None if sid == -1 else sid, score))
    return rows


# --- refinement weights -----------------------------------------------------

def write_weights(path, weights: dict):
    """`W frame_id w` for every frame that carries a global prior."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# W frame w\n")
        for frame_id in sorted(weights):
            fh.write(f"W {frame_id} " + FLOAT_FMT % weights[frame_id] + "\n")


def read_weights(path) -> dict:
    weights = {}
    for line_no, tokens in _lines(path):
        if tokens[0] != "W":
            raise FileFormatError(path, line_no, f"unknown weight record {tokens[0]!r}")
        _need(tokens[1:], 2, path, line_no, "W record")
        frame_id = _ints(tokens[1:2], path, line_no)[0]
        weights[frame_id] = _floats(tokens[2:3], path, line_no)[0]
    return weights


# --- iteration log ----------------------------------------------------------

def write_iteration_log(path, rows):
    """CSV rows (iter, step, objective, max_dw, runtime_ms)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iter,step,objective,max_dw,runtime_ms\n")
        for it, step, obj, max_dw, ms in rows:
            fh.write(
                f"{it},{step}," + FLOAT_FMT % obj + "," + FLOAT_FMT % max_dw
                + "," + FLOAT_FMT % ms + "\n"
            )


def read_iteration_log(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or line_no == 1:
                continue
            parts = raw.split(",")
            _need(parts, 5, path, line_no, "log row")
            it = _ints(parts[:1], path, line_no)[0]
            obj, max_dw, ms = _floats(parts[2:], path, line_no)
            rows.append((it, parts[1], obj, max_dw, ms))
    return rows


# --- labels and timing ------------------------------------------------------

def write_labels(path, labels: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(labels, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_labels(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(path, exc.lineno, exc.msg) from None


def write_timing(path, rows):
    """`STAGE name n_frames seconds` per pipeline stage."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# STAGE name n_frames seconds\n")
        for name, n_frames, seconds in rows:
            fh.write(f"STAGE {name} {n_frames} " + FLOAT_FMT % seconds + "\n")


def read_timing(path):
    rows = []
    for line_no, tokens in _lines(path):
        if tokens[0] != "STAGE":
            raise FileFormatError(path, line_no, f"unknown timing record {tokens[0]!r}")
        _need(tokens[1:], 3, path, line_no, "STAGE record")
        n_frames = _ints(tokens[2:3], path, line_no)[0]
        seconds = _floats(tokens[3:4], path, line_no)[0]
        rows.append((tokens[1], n_frames, seconds))
    return rows

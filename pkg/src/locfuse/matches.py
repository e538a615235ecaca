"""Correspondence containers shared across localization, fusion, and refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 3D sources a session map can tag its matches with. The synthetic harness
# emits SIM; the distinction only matters for the per-source pre-filter.
SOURCES = ("SFM", "SLAM", "DENSE", "DISPARITY", "SIM")


@dataclass(frozen=True)
class Match2D3D:
    """One query pixel matched to one world point from a session map."""

    query: np.ndarray  # (2,) pixel in the query image
    world: np.ndarray  # (3,) point in the world frame
    source: str = "SIM"
    session_id: int = 0

    def __post_init__(self):
        q = np.asarray(self.query, dtype=float).reshape(2)
        w = np.asarray(self.world, dtype=float).reshape(3)
        q.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "query", q)
        object.__setattr__(self, "world", w)
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


def match_arrays(matches):
    """Stack a match list into (uv (N,2), xyz (N,3)) arrays."""
    n = len(matches)
    uv = np.empty((n, 2))
    xyz = np.empty((n, 3))
    for i, m in enumerate(matches):
        uv[i] = m.query
        xyz[i] = m.world
    return uv, xyz


@dataclass
class MatchSet2D2D:
    """Tracked pixel correspondences between two query frames."""

    frame_a: int
    frame_b: int
    uv_a: np.ndarray  # (N, 2)
    uv_b: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.uv_a = np.asarray(self.uv_a, dtype=float).reshape(-1, 2)
        self.uv_b = np.asarray(self.uv_b, dtype=float).reshape(-1, 2)
        if len(self.uv_a) != len(self.uv_b):
            raise ValueError("track sides must have equal length")

    def __len__(self):
        return len(self.uv_a)

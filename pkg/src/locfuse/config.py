"""Flat key = value configuration shared by the library and the CLI.

Every tunable lives here with its default; stage commands read a config file
(if given) and apply CLI overrides on top, so a run is fully described by its
input files plus the flag list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfigError
from .geometry import CameraIntrinsics

REFINE_VARIANTS = ("pgba", "pgo", "pgo_2d2d", "pgo_2d3d")


@dataclass(frozen=True)
class PipelineConfig:
    # camera model (shared by all synthetic sessions and the query camera)
    camera_fx: float = 500.0
    camera_fy: float = 500.0
    camera_cx: float = 320.0
    camera_cy: float = 240.0
    camera_width: int = 640
    camera_height: int = 480

    # pose-error metric: translation meters + this weight times rotation log
    # norm in radians (applies to priors, relative terms, and evaluation)
    rotation_weight: float = 1.0

    # map building
    min_triangulation_angle_deg: float = 1.0
    epipolar_prune_threshold: float = 4.0
    map_reproj_prune_px: float = 3.0

    # single-frame localization
    ransac_threshold_px: float = 3.0
    ransac_max_iters: int = 1000
    ransac_confidence: float = 0.999
    dedupe_radius_px: float = 0.5

    # consensus edge scoring
    sampson_inlier_threshold: float = 4.0
    min_edge_baseline_m: float = 0.05

    # robust refinement
    lambda_reproj: float = 1e-2
    lambda_sampson: float = 1e-2
    robust_weight_scale: float = 0.5
    huber_reproj_px: float = 3.0
    huber_sampson_sqpx: float = 4.0
    seed_min_matches: int = 10
    em_weight_tol: float = 1e-3
    em_max_iters: int = 20
    lm_max_iters: int = 12
    skip_stride: int = 0
    refine_variant: str = "pgba"

    # polish round
    polish_threshold_px: float = 3.0
    polish_snap_m: float = 0.02

    # evaluation
    recall_thresholds: tuple = (0.05, 0.1, 0.2, 0.5, 1.0, 3.0)

    # synthetic scenario
    sim_frames: int = 200
    sim_sessions: int = 3
    sim_extent_m: float = 400.0
    sim_points_per_frame: int = 20
    sim_pixel_noise_px: float = 1.0
    sim_outlier_2d3d_rate: float = 0.1
    sim_outlier_2d2d_rate: float = 0.05
    sim_gross_outlier_rate: float = 0.1
    sim_gross_outlier_m: float = 5.0
    sim_prior_noise_m: float = 0.04
    sim_prior_noise_deg: float = 0.3
    sim_matches_per_session: int = 18
    sim_session_failure_rate: float = 0.1
    sim_drift_trans_per_m: float = 0.01
    sim_drift_rot_per_m: float = 0.002
    sim_map_noise_m: float = 0.005
    sim_map_drift_m: float = 0.005
    sim_map_drift_len_m: float = 80.0
    sim_session_bias_m: float = 0.0
    sim_bias_len_m: float = 30.0
    sim_count_jitter: float = 0.5
    sim_speed_mps: float = 1.5
    sim_stop_rate: float = 0.005
    sim_stop_frames: int = 3
    sim_depth_min_m: float = 6.0
    sim_depth_max_m: float = 35.0
    sim_track_stride: int = 1

    seed: int = 0

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.camera_fx,
            fy=self.camera_fy,
            cx=self.camera_cx,
            cy=self.camera_cy,
            width=self.camera_width,
            height=self.camera_height,
        )

    def validate(self) -> "PipelineConfig":
        rates = [
            ("sim_outlier_2d3d_rate", self.sim_outlier_2d3d_rate),
            ("sim_outlier_2d2d_rate", self.sim_outlier_2d2d_rate),
            ("sim_gross_outlier_rate", self.sim_gross_outlier_rate),
            ("sim_session_failure_rate", self.sim_session_failure_rate),
            ("sim_stop_rate", self.sim_stop_rate),
        ]
        for name, value in rates:
            if not 0.0 <= value <= 1.0:
                raise InvalidConfigError(f"{name} must be in [0, 1], got {value}")
        positive = [
            ("rotation_weight", self.rotation_weight),
            ("ransac_threshold_px", self.ransac_threshold_px),
            ("sampson_inlier_threshold", self.sampson_inlier_threshold),
            ("lambda_reproj", self.lambda_reproj),
            ("lambda_sampson", self.lambda_sampson),
            ("robust_weight_scale", self.robust_weight_scale),
            ("huber_reproj_px", self.huber_reproj_px),
            ("huber_sampson_sqpx", self.huber_sampson_sqpx),
            ("em_weight_tol", self.em_weight_tol),
            ("sim_speed_mps", self.sim_speed_mps),
        ]
        for name, value in positive:
            if value <= 0.0:
                raise InvalidConfigError(f"{name} must be positive, got {value}")
        for name in ("sim_pixel_noise_px", "sim_gross_outlier_m", "sim_map_noise_m",
                     "sim_map_drift_m", "sim_session_bias_m", "sim_count_jitter",
                     "sim_drift_trans_per_m", "sim_drift_rot_per_m",
                     "sim_prior_noise_m", "sim_prior_noise_deg", "polish_snap_m"):
            if getattr(self, name) < 0.0:
                raise InvalidConfigError(f"{name} must be >= 0")
        for name in ("sim_frames", "sim_sessions", "sim_points_per_frame",
                     "sim_matches_per_session",
                     "ransac_max_iters", "em_max_iters", "lm_max_iters"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.refine_variant not in REFINE_VARIANTS:
            raise InvalidConfigError(
                f"refine_variant must be one of {REFINE_VARIANTS}, "
                f"got {self.refine_variant!r}"
            )
        if not 0.0 < self.ransac_confidence < 1.0:
            raise InvalidConfigError("ransac_confidence must be in (0, 1)")
        if self.sim_depth_min_m <= 0 or self.sim_depth_max_m <= self.sim_depth_min_m:
            raise InvalidConfigError("depth range must satisfy 0 < min < max")
        if len(self.recall_thresholds) == 0:
            raise InvalidConfigError("recall_thresholds must not be empty")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("tuple", tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise InvalidConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def apply_assignments(cfg: PipelineConfig, assignments) -> PipelineConfig:
    """Apply 'key=value' override strings (CLI --set and friends)."""
    updates = {}
    for item in assignments:
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise InvalidConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    if not updates:
        return cfg
    return dataclasses.replace(cfg, **updates).validate()


def load_config(path) -> PipelineConfig:
    """Read a flat key = value file ('#' starts a comment)."""
    updates = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise InvalidConfigError(f"{path}:{line_no}: expected key = value")
            key, raw = body.split("=", 1)
            key = key.strip()
            if key not in _FIELDS:
                raise InvalidConfigError(f"{path}:{line_no}: unknown key {key!r}")
            try:
                updates[key] = _parse_value(key, raw)
            except InvalidConfigError as exc:
                raise InvalidConfigError(f"{path}:{line_no}: {exc}") from None
    return dataclasses.replace(PipelineConfig(), **updates).validate()


def save_config(path, cfg: PipelineConfig) -> None:
    lines = ["# locfuse configuration (flat key = value)"]
    for name, f in _FIELDS.items():
        value = getattr(cfg, name)
        if isinstance(value, float):
            text = format(value, ".17g")
        elif isinstance(value, tuple):
            text = ",".join(format(v, ".17g") for v in value)
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Run configuration: one flat record of every pipeline tunable.

Loadable from YAML (or JSON) and overridable by CLI flags; unknown keys are
rejected so typos fail loudly. The flat record is translated into the
engine's nested config objects at run time.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from . import ba, engine, pnp, triangulate, twoview


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = machine parallelism
    min_match_score: float = 0.0
    # two-view estimation
    inlier_threshold: float = 4e-3
    tukey_c_factor: float = 3.0
    ransac_max_iterations: int = 2000
    ransac_confidence: float = 0.99
    homography_ratio: float = 0.9
    min_pair_matches: int = 8
    min_init_matches: int = 100
    min_init_inlier_ratio: float = 0.5
    # registration
    pnp_threshold_px: float = 8.0
    min_pnp_inliers: int = 12
    pnp_max_iterations: int = 1000
    nbv_lambda: float = 0.5
    feature_weight_mode: str = "uniform"
    # triangulation
    max_reproj_px: float = 8.0
    min_tri_angle_deg: float = 1.5
    # bundle adjustment and priors
    lambda_t: float = 1.0
    lambda_r: float = 0.1
    lambda_m: float = 0.1
    alpha: float = 0.05
    beta: float = 0.05
    min_edge_matches: int = 15
    ba_max_iterations: int = 100
    local_ba_window: int = 8
    global_ba_interval: int = 5
    focal_lower_factor: float = 0.3
    focal_upper_factor: float = 3.0
    # prior lift heights (meters)
    ground_height: float = 1.7
    aerial_height: float = 30.0
    satellite_height: float = 200.0
    include_satellite_in_coverage: bool = False
    prior_position_gate: float | None = 25.0

    def validate(self) -> None:
        checks = [
            ("workers", self.workers >= 0),
            ("min_match_score", 0.0 <= self.min_match_score <= 1.0),
            ("inlier_threshold", self.inlier_threshold > 0),
            ("tukey_c_factor", self.tukey_c_factor > 0),
            ("ransac_max_iterations", self.ransac_max_iterations >= 1),
            ("ransac_confidence", 0.0 < self.ransac_confidence < 1.0),
            ("homography_ratio", 0.0 < self.homography_ratio <= 1.0),
            ("min_pair_matches", self.min_pair_matches >= 5),
            ("min_init_matches", self.min_init_matches >= 5),
            ("min_init_inlier_ratio", 0.0 < self.min_init_inlier_ratio <= 1.0),
            ("pnp_threshold_px", self.pnp_threshold_px > 0),
            ("min_pnp_inliers", self.min_pnp_inliers >= 4),
            ("pnp_max_iterations", self.pnp_max_iterations >= 1),
            ("nbv_lambda", self.nbv_lambda >= 0),
            ("feature_weight_mode", self.feature_weight_mode in ("uniform", "score_weighted")),
            ("max_reproj_px", self.max_reproj_px > 0),
            ("min_tri_angle_deg", 0 <= self.min_tri_angle_deg < 90),
            ("lambda_t", self.lambda_t >= 0),
            ("lambda_r", self.lambda_r >= 0),
            ("lambda_m", self.lambda_m >= 0),
            ("alpha", self.alpha >= 0),
            ("beta", self.beta >= 0),
            ("min_edge_matches", self.min_edge_matches >= 0),
            ("ba_max_iterations", self.ba_max_iterations >= 1),
            ("local_ba_window", self.local_ba_window >= 2),
            ("global_ba_interval", self.global_ba_interval >= 1),
            ("focal_lower_factor", 0 < self.focal_lower_factor <= 1.0),
            ("focal_upper_factor", self.focal_upper_factor >= 1.0),
            ("ground_height", self.ground_height >= 0),
            ("aerial_height", self.aerial_height >= 0),
            ("satellite_height", self.satellite_height >= 0),
            (
                "prior_position_gate",
                self.prior_position_gate is None or self.prior_position_gate > 0,
            ),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name} = {getattr(self, name)!r} out of range")

    def engine_config(self) -> engine.EngineConfig:
        return engine.EngineConfig(
            seed=self.seed,
            workers=self.workers,
            min_pair_matches=self.min_pair_matches,
            min_init_matches=self.min_init_matches,
            min_init_inlier_ratio=self.min_init_inlier_ratio,
            twoview=twoview.TwoViewConfig(
                inlier_threshold=self.inlier_threshold,
                tukey_c_factor=self.tukey_c_factor,
                max_iterations=self.ransac_max_iterations,
                confidence=self.ransac_confidence,
                homography_ratio=self.homography_ratio,
            ),
            pnp=pnp.PnPConfig(
                threshold_px=self.pnp_threshold_px,
                min_inliers=self.min_pnp_inliers,
                max_iterations=self.pnp_max_iterations,
            ),
            nbv=engine.NbvConfig(
                nbv_lambda=self.nbv_lambda, feature_weight_mode=self.feature_weight_mode
            ),
            triangulation=triangulate.TriangulationConfig(
                max_reproj_px=self.max_reproj_px, min_angle_deg=self.min_tri_angle_deg
            ),
            priors=ba.PriorWeightConfig(
                lambda_t=self.lambda_t,
                lambda_r=self.lambda_r,
                lambda_m=self.lambda_m,
                alpha=self.alpha,
                beta=self.beta,
                min_edge_matches=self.min_edge_matches,
            ),
            ba_max_iterations=self.ba_max_iterations,
            local_ba_window=self.local_ba_window,
            global_ba_interval=self.global_ba_interval,
            focal_lower_factor=self.focal_lower_factor,
            focal_upper_factor=self.focal_upper_factor,
            ground_height=self.ground_height,
            aerial_height=self.aerial_height,
            satellite_height=self.satellite_height,
            include_satellite_in_coverage=self.include_satellite_in_coverage,
            prior_position_gate=self.prior_position_gate,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    if value is None:
        return None
    f = _FIELDS[name]
    if f.type in ("bool",):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {value!r} as bool")
    if f.type == "int":
        return int(value)
    if f.type == "float":
        return float(value)
    if f.type == "float | None":
        if str(value).lower() in ("none", "null", ""):
            return None
        return float(value)
    return str(value)


def apply_updates(cfg: RunConfig, updates: dict) -> RunConfig:
    """Return a copy of ``cfg`` with the given key/value overrides applied."""
    unknown = set(updates) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    merged = dataclasses.replace(
        cfg, **{k: _coerce(k, v) for k, v in updates.items()}
    )
    merged.validate()
    return merged


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a config file (YAML/JSON) and apply overrides; flags win."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of option names to values")
        cfg = apply_updates(cfg, data)
    if overrides:
        cfg = apply_updates(cfg, overrides)
    cfg.validate()
    return cfg

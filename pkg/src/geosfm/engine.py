"""Incremental reconstruction driver.

Pipeline per run: verify every usable pair with robust essential-matrix
RANSAC, build tracks from the verified matches, pick the initial pair,
seed it (anchored to horizontal priors when available), then grow the
reconstruction with an uncertainty-aware next-best-view loop: provisional
PnP scores candidates, the winner is registered, new tracks are
triangulated, a sliding-window local bundle adjustment runs after every
registration and a global one on a fixed cadence and at termination.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ba, pnp, triangulate, twoview
from .fileio import GeometricPrior
from .geometry import rotation_between, so3_exp, yaw_rotation
from .model import (
    CameraIntrinsics,
    MatchPair,
    PoseSE3,
    Reconstruction,
    SceneModel,
    Track,
    View,
    build_tracks,
)

logger = logging.getLogger(__name__)


class EngineError(RuntimeError):
    pass


class NoValidPairError(EngineError):
    """No pair qualifies for initialization."""


@dataclass
class NbvConfig:
    nbv_lambda: float = 0.5  # uncertainty regularizer
    feature_weight_mode: str = "uniform"  # or "score_weighted"

    def __post_init__(self) -> None:
        if self.nbv_lambda < 0:
            raise ValueError("nbv_lambda must be >= 0")
        if self.feature_weight_mode not in ("uniform", "score_weighted"):
            raise ValueError(f"unknown feature_weight_mode {self.feature_weight_mode!r}")


@dataclass
class EngineConfig:
    seed: int = 0
    workers: int = 0  # 0 = machine parallelism
    # pair verification / initialization
    min_pair_matches: int = 8
    min_init_matches: int = 100
    min_init_inlier_ratio: float = 0.5
    twoview: twoview.TwoViewConfig = field(default_factory=twoview.TwoViewConfig)
    # registration
    pnp: pnp.PnPConfig = field(default_factory=pnp.PnPConfig)
    nbv: NbvConfig = field(default_factory=NbvConfig)
    # structure
    triangulation: triangulate.TriangulationConfig = field(
        default_factory=triangulate.TriangulationConfig
    )
    # bundle adjustment
    priors: ba.PriorWeightConfig = field(default_factory=ba.PriorWeightConfig)
    ba_max_iterations: int = 100
    local_ba_window: int = 8
    global_ba_interval: int = 5
    focal_lower_factor: float = 0.3
    focal_upper_factor: float = 3.0
    # prior lift
    ground_height: float = 1.7
    aerial_height: float = 30.0
    satellite_height: float = 200.0
    include_satellite_in_coverage: bool = False
    # registrations whose pose lands further than this from the view's prior
    # are rejected (repetitive-structure mismatch guard); None disables
    prior_position_gate: float | None = 25.0

    @property
    def huber_px(self) -> float:
        return 2.0 * self.triangulation.max_reproj_px

    def z_seed(self, altitude_class: str) -> float:
        return {
            "ground": self.ground_height,
            "aerial": self.aerial_height,
            "satellite": self.satellite_height,
        }[altitude_class]


@dataclass
class PnPResultView:
    """PnP output plus the scalarized uncertainty used by NBV."""

    result: pnp.PnPResult
    uncertainty: float


@dataclass
class PairGeometry:
    view_a: int
    view_b: int
    n_matches: int  # matches surviving ingestion (Eq. count for init selection)
    estimate: twoview.EssentialEstimate | None
    relpose: twoview.RelativePose | None
    low_parallax: bool = False
    failure: str | None = None

    @property
    def usable(self) -> bool:
        return self.estimate is not None and self.relpose is not None


@dataclass
class RunStats:
    timings: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def log_event(self, message: str) -> None:
        self.events.append(message)
        logger.info("%s", message)


def count_matches(pair: MatchPair) -> int:
    """Number of correspondences surviving ingestion filtering."""
    return len(pair)


def initial_focal(height: int, width: int) -> float:
    """Focal-length bootstrap when no calibration is available."""
    if height <= 0 or width <= 0:
        raise ValueError("image dimensions must be positive")
    return 1.2 * max(height, width)


def prior_to_initial_pose(prior: GeometricPrior, z: float) -> PoseSE3:
    """Lift a horizontal 3-DoF prior to a full pose: yaw-only rotation about
    +Z and the prior position with the supplied height."""
    return PoseSE3(yaw_rotation(prior.yaw), np.array([prior.x, prior.y, z]))


def pose_uncertainty(result: pnp.PnPResult) -> float:
    """Scalar pose uncertainty: trace of the 6x6 tangent-space covariance."""
    return float(np.trace(result.covariance))


def select_initial_pair(
    pairs: dict[tuple[int, int], PairGeometry],
    min_init_matches: int = 100,
    min_inlier_ratio: float = 0.5,
) -> tuple[int, int]:
    """Best seed pair: most epipolar inliers among well-matched, validated,
    non-degenerate pairs; ties broken by inlier ratio then pair order."""
    best_key = None
    best_pair = None
    for key in sorted(pairs):
        g = pairs[key]
        if g.n_matches < min_init_matches or not g.usable or g.low_parallax:
            continue
        if g.estimate.inlier_ratio < min_inlier_ratio:
            continue
        cand = (-len(g.estimate.inlier_indices), -g.estimate.inlier_ratio, key)
        if best_key is None or cand < best_key:
            best_key = cand
            best_pair = key
    if best_pair is None:
        raise NoValidPairError(
            "no pair passes the initialization gates "
            f"(>= {min_init_matches} matches, validated essential geometry, parallax)"
        )
    return best_pair


class IncrementalEngine:
    """Holds the state of one reconstruction run."""

    def __init__(self, model: SceneModel, priors, cfg: EngineConfig | None = None):
        self.model = model
        self.cfg = cfg or EngineConfig()
        self.priors: dict[int, GeometricPrior] = {p.view_id: p for p in (priors or [])}
        self.stats = RunStats()
        # work on private View records so repeat runs on one parsed model
        # start from the same state (the input model is never mutated)
        views = {
            vid: View(
                view_id=v.view_id,
                name=v.name,
                width=v.width,
                height=v.height,
                altitude_class=v.altitude_class,
                intrinsics=None,
                pose=None,
                camera_group=v.camera_group,
            )
            for vid, v in model.views.items()
        }
        self.recon = Reconstruction(views=views, keypoints=model.keypoints)
        self.pair_geometry: dict[tuple[int, int], PairGeometry] = {}
        self.verified: dict[tuple[int, int], MatchPair] = {}
        # full track graph: track id -> {view_id: keypoint_id}; the Track
        # objects in the reconstruction hold only registered observations
        self.graph: dict[int, dict[int, int]] = {}
        self.track_by_id: dict[int, Track] = {}
        self.track_of: dict[tuple[int, int], int] = {}
        self.view_observations: dict[int, list[tuple[int, int]]] = {}
        self.track_scores: dict[int, float] = {}
        self.view_match_counts: dict[int, int] = {}
        self.pair_match_counts: dict[tuple[int, int], int] = {}
        self.registration_order: list[int] = []
        self._tri_attempt_size: dict[int, int] = {}
        self._workers = self.cfg.workers if self.cfg.workers > 0 else (os.cpu_count() or 1)

    # -- setup ---------------------------------------------------------------

    def bootstrap_intrinsics(self) -> None:
        for view in self.recon.views.values():
            if view.intrinsics is None:
                view.intrinsics = CameraIntrinsics.default_for(
                    view.width, view.height, initial_focal(view.height, view.width)
                )
            if view.camera_group is None:
                view.camera_group = (
                    f"{view.altitude_class}:{view.width}x{view.height}"
                )

    def _pair_rng(self, tag: int, *ids: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, tag, *ids])

    def verify_pairs(self) -> None:
        """Robust two-view estimation on every pair; keeps inlier matches."""
        t0 = time.perf_counter()
        keys = [
            k
            for k in sorted(self.model.matches)
            if len(self.model.matches[k]) >= max(5, self.cfg.min_pair_matches)
        ]

        def verify(key):
            pair = self.model.matches[key]
            pts_a, pts_b = self.model.match_positions(pair)
            K_a = self.recon.views[key[0]].intrinsics.matrix()
            K_b = self.recon.views[key[1]].intrinsics.matrix()
            rng = self._pair_rng(101, *key)
            try:
                est = twoview.estimate_essential_ransac(
                    pts_a, pts_b, K_a, K_b, self.cfg.twoview, rng
                )
                x_a = twoview.normalize_points(pts_a[est.inlier_indices], K_a)
                x_b = twoview.normalize_points(pts_b[est.inlier_indices], K_b)
                rel = twoview.decompose_essential(est.E, x_a, x_b)
                return PairGeometry(*key, len(pair), est, rel)
            except twoview.TwoViewError as exc:
                return PairGeometry(*key, len(pair), None, None, failure=str(exc))

        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            results = list(pool.map(verify, keys))
        for key, geom in zip(keys, results):
            self.pair_geometry[key] = geom
            if not geom.usable:
                continue
            pair = self.model.matches[key]
            sel = geom.estimate.inlier_indices
            self.verified[key] = MatchPair(
                key[0], key[1], pair.indices[sel], pair.scores[sel]
            )
        for key, pair in self.verified.items():
            n = len(pair)
            self.pair_match_counts[key] = n
            for vid in key:
                self.view_match_counts[vid] = self.view_match_counts.get(vid, 0) + n
        self.stats.timings["verify_pairs"] = time.perf_counter() - t0
        self.stats.counts["pairs_tested"] = len(keys)
        self.stats.counts["pairs_verified"] = len(self.verified)

    def flag_low_parallax(self, keys) -> None:
        """Homography-degeneracy check for initialization candidates only."""
        for key in sorted(keys):
            geom = self.pair_geometry.get(key)
            if geom is None or not geom.usable or not len(geom.estimate.inlier_indices):
                continue
            pair = self.model.matches[key]
            pts_a, pts_b = self.model.match_positions(pair)
            sel = geom.estimate.inlier_indices
            K_a = self.recon.views[key[0]].intrinsics.matrix()
            K_b = self.recon.views[key[1]].intrinsics.matrix()
            ratio = twoview.homography_inlier_ratio(
                twoview.normalize_points(pts_a[sel], K_a),
                twoview.normalize_points(pts_b[sel], K_b),
                self.cfg.twoview.inlier_threshold,
                self._pair_rng(303, *key),
            )
            geom.low_parallax = ratio > self.cfg.twoview.homography_ratio

    def build_track_graph(self) -> None:
        t0 = time.perf_counter()
        result = build_tracks(self.verified)
        self.recon.tracks = []
        for full in result.tracks:
            self.graph[full.track_id] = {v: k for v, k in full.observations}
            track = Track(track_id=full.track_id, observations=[])
            self.track_by_id[full.track_id] = track
            self.recon.tracks.append(track)
            for v, k in full.observations:
                self.track_of[(v, k)] = full.track_id
                self.view_observations.setdefault(v, []).append((full.track_id, k))
        # per-track mean match score (used by score-weighted NBV)
        sums = {tid: [0.0, 0] for tid in self.graph}
        for key, pair in self.verified.items():
            for (ka, kb), score in zip(pair.indices, pair.scores):
                ta = self.track_of.get((key[0], int(ka)))
                tb = self.track_of.get((key[1], int(kb)))
                if ta is not None and ta == tb:
                    acc = sums[ta]
                    acc[0] += float(score)
                    acc[1] += 1
        self.track_scores = {
            tid: (s / n if n else 1.0) for tid, (s, n) in sums.items()
        }
        self.stats.timings["build_tracks"] = time.perf_counter() - t0
        self.stats.counts["tracks_built"] = len(result.tracks)
        self.stats.counts["tracks_dropped_inconsistent"] = result.dropped_components

    def _attach_registered_view(self, view_id: int) -> None:
        """Move the new view's graph observations into the reconstruction."""
        for tid, kp in self.view_observations.get(view_id, []):
            track = self.track_by_id[tid]
            if all(v != view_id for v, _ in track.observations):
                track.observations.append((view_id, kp))

    # -- initialization -------------------------------------------------------

    def _seed_initial_pair(self, key: tuple[int, int]) -> None:
        va, vb = key
        geom = self.pair_geometry[key]
        rel = geom.relpose
        # metric-free pair: camera a at the origin, unit baseline
        R_a = np.eye(3)
        C_a = np.zeros(3)
        R_b = rel.rotation.T
        C_b = -rel.rotation.T @ rel.translation

        pa = self.priors.get(va)
        pb = self.priors.get(vb)
        if pa is not None and pb is not None:
            za = self.cfg.z_seed(self.model.views[va].altitude_class)
            zb = self.cfg.z_seed(self.model.views[vb].altitude_class)
            target_a = np.array([pa.x, pa.y, za])
            target_b = np.array([pb.x, pb.y, zb])
            baseline = np.linalg.norm(target_b - target_a)
            scale = baseline if baseline > 1e-3 else 1.0
            # the pair lives in camera-a coordinates; align its baseline with
            # the prior baseline, then roll about it so image rows are level
            # (camera "down" axes as close to -Z as a rigid motion allows)
            v_pr = (target_b - target_a) / max(baseline, 1e-9)
            R1 = rotation_between(C_b, v_pr)
            downs = [R1 @ R_a[:, 1], R1 @ R_b[:, 1]]
            acc_a = -sum(d[2] for d in downs)
            acc_b = -sum(np.cross(v_pr, d)[2] for d in downs)
            roll = math.atan2(acc_b, acc_a)
            R_align = so3_exp(v_pr * roll) @ R1
            R_a, R_b = R_align @ R_a, R_align @ R_b
            C_a, C_b = R_align @ (scale * C_a) + target_a, R_align @ (scale * C_b) + target_a
            self.stats.log_event(
                f"initial pair ({va}, {vb}) anchored to priors, baseline {scale:.2f} m"
            )
        elif pa is not None or pb is not None:
            p = pa if pa is not None else pb
            anchor = np.array(
                [p.x, p.y, self.cfg.z_seed(self.model.views[p.view_id].altitude_class)]
            )
            offset = anchor - (C_a if pa is not None else C_b)
            C_a = C_a + offset
            C_b = C_b + offset
            self.stats.log_event(
                f"initial pair ({va}, {vb}) translated onto single prior of view {p.view_id}"
            )
        self.recon.register(va, PoseSE3(R_a, C_a))
        self.recon.register(vb, PoseSE3(R_b, C_b))
        self._attach_registered_view(va)
        self._attach_registered_view(vb)
        self.registration_order += [va, vb]

    # -- structure ------------------------------------------------------------

    def _registered_observations(self, track: Track):
        obs = []
        for view_id, kp_id in track.observations:
            if view_id in self.recon.registered_ids:
                view = self.recon.views[view_id]
                P = view.pose.projection_matrix(view.intrinsics.matrix())
                obs.append((P, self.model.keypoints[view_id][kp_id]))
        return obs

    def triangulate_pending(self) -> int:
        """Try every untriangulated track whose registered support grew."""
        t0 = time.perf_counter()
        admitted = 0
        for track in self.recon.tracks:
            if track.point is not None:
                continue
            obs = self._registered_observations(track)
            if len(obs) < 2 or self._tri_attempt_size.get(track.track_id) == len(obs):
                continue
            self._tri_attempt_size[track.track_id] = len(obs)
            try:
                result = triangulate.triangulate_multiview(obs, self.cfg.triangulation)
            except triangulate.TriangulationError:
                continue
            if triangulate.admit_track(result, self.cfg.triangulation):
                track.point = result.point
                admitted += 1
        self.stats.timings["triangulate"] = (
            self.stats.timings.get("triangulate", 0.0) + time.perf_counter() - t0
        )
        self.stats.counts["tracks_admitted"] = (
            self.stats.counts.get("tracks_admitted", 0) + admitted
        )
        return admitted

    def prune_observations(self) -> int:
        """Drop observations reprojecting worse than the admission gate."""
        threshold = self.cfg.triangulation.max_reproj_px
        removed = 0
        for track in self.recon.tracks:
            if track.point is None:
                continue
            kept = []
            for view_id, kp_id in track.observations:
                view = self.recon.views[view_id]
                uv, w = ba.project_point(view.intrinsics, view.pose, track.point.position)
                err = float(np.linalg.norm(uv - self.model.keypoints[view_id][kp_id]))
                if w > 0 and err < threshold:
                    kept.append((view_id, kp_id))
                else:
                    removed += 1
                    self.track_of.pop((view_id, kp_id), None)
                    self.graph[track.track_id].pop(view_id, None)
                    obs_list = self.view_observations.get(view_id, [])
                    self.view_observations[view_id] = [
                        (t, k) for t, k in obs_list if t != track.track_id
                    ]
            if len(kept) != len(track.observations):
                track.observations = kept
            if len(track.observations) < 2:
                track.point = None
                self._tri_attempt_size.pop(track.track_id, None)
        self.stats.counts["observations_pruned"] = (
            self.stats.counts.get("observations_pruned", 0) + removed
        )
        return removed

    # -- bundle adjustment ----------------------------------------------------

    def _build_problem(self, free_views: set[int] | None) -> tuple[ba.BaProblem, list[int], list[Track]]:
        """Assemble a BA problem over registered views.

        ``free_views`` restricts which poses move (local BA); None frees all
        and also frees the shared intrinsics.
        """
        reg = sorted(self.recon.registered_ids)
        pose_index = {vid: i for i, vid in enumerate(reg)}
        rotations = np.stack([self.recon.views[v].pose.rotation for v in reg])
        translations = np.stack([self.recon.views[v].pose.translation for v in reg])

        groups = sorted({self.recon.views[v].camera_group for v in reg})
        group_index = {g: i for i, g in enumerate(groups)}
        intr = np.zeros((len(groups), 3))
        dist = np.zeros(len(groups))
        bounds = np.zeros((len(groups), 2))
        for g in groups:
            vid = next(v for v in reg if self.recon.views[v].camera_group == g)
            view = self.recon.views[vid]
            intr[group_index[g]] = [
                view.intrinsics.focal,
                view.intrinsics.principal_point[0],
                view.intrinsics.principal_point[1],
            ]
            dist[group_index[g]] = view.intrinsics.radial_distortion
            f_boot = initial_focal(view.height, view.width)
            bounds[group_index[g]] = [
                self.cfg.focal_lower_factor * f_boot,
                self.cfg.focal_upper_factor * f_boot,
            ]
        pose_groups = np.array(
            [group_index[self.recon.views[v].camera_group] for v in reg], dtype=int
        )

        global_ba = free_views is None
        if free_views is None:
            free_views = set(reg)
        tracks = []
        for track in self.recon.tracks:
            if track.point is None:
                continue
            if global_ba or any(
                v in free_views for v, _ in track.observations if v in self.recon.registered_ids
            ):
                tracks.append(track)
        points = (
            np.stack([t.point.position for t in tracks]) if tracks else np.zeros((0, 3))
        )
        obs_cam, obs_pt, obs_uv = [], [], []
        for j, track in enumerate(tracks):
            for view_id, kp_id in track.observations:
                if view_id not in self.recon.registered_ids:
                    continue
                obs_cam.append(pose_index[view_id])
                obs_pt.append(j)
                obs_uv.append(self.model.keypoints[view_id][kp_id])

        fixed_pose = np.zeros((len(reg), 6), dtype=bool)
        for vid in reg:
            if vid not in free_views:
                fixed_pose[pose_index[vid]] = True
        # intrinsics move only in global BA and only once the problem has
        # enough views to separate focal length from structure depth
        fixed_intr = np.zeros((len(groups), 3), dtype=bool)
        if not global_ba or len(reg) < 4:
            fixed_intr[:] = True

        z_seeds = {
            vid: self.cfg.z_seed(self.recon.views[vid].altitude_class) for vid in reg
        }
        trans_p, rot_p, relmot_p = ba.build_prior_terms(
            pose_index,
            self.priors,
            z_seeds,
            self.view_match_counts,
            self.pair_match_counts,
            self.cfg.priors,
        )
        problem = ba.BaProblem(
            rotations=rotations,
            translations=translations,
            intrinsics=intr,
            distortions=dist,
            pose_groups=pose_groups,
            points=points,
            obs_cam=np.array(obs_cam, dtype=int),
            obs_pt=np.array(obs_pt, dtype=int),
            obs_uv=np.array(obs_uv) if obs_uv else np.zeros((0, 2)),
            fixed_pose_params=fixed_pose,
            fixed_intr_params=fixed_intr,
            focal_bounds=bounds,
            trans_priors=trans_p,
            rot_priors=rot_p,
            relmot_priors=relmot_p,
        )
        if not problem.has_gauge():
            # prior-free run: pin the first registered pose and the scale
            first = pose_index[self.registration_order[0]]
            problem.fixed_pose_params[first] = True
            others = [i for i in range(len(reg)) if i != first and not fixed_pose[i].all()]
            if others:
                second = others[0]
                axis = int(
                    np.argmax(np.abs(translations[second] - translations[first]))
                )
                problem.fixed_pose_params[second, 3 + axis] = True
        return problem, reg, tracks

    def run_ba(self, free_views: set[int] | None, tag: str, final: bool = False) -> ba.BaResult:
        t0 = time.perf_counter()
        problem, reg, tracks = self._build_problem(free_views)
        if final:
            options = ba.BaOptions(
                max_iterations=self.cfg.ba_max_iterations, huber_px=self.cfg.huber_px
            )
        else:
            # intermediate polish: the final global pass owns convergence
            options = ba.BaOptions(
                max_iterations=min(50, self.cfg.ba_max_iterations),
                rel_cost_tol=1e-6,
                huber_px=self.cfg.huber_px,
            )
        result = ba.run_bundle_adjustment(problem, options)
        # write back
        groups = sorted({self.recon.views[v].camera_group for v in reg})
        for i, vid in enumerate(reg):
            view = self.recon.views[vid]
            view.pose = PoseSE3(problem.rotations[i], problem.translations[i])
            gi = groups.index(view.camera_group)
            view.intrinsics.focal = float(problem.intrinsics[gi, 0])
            view.intrinsics.principal_point = (
                float(problem.intrinsics[gi, 1]),
                float(problem.intrinsics[gi, 2]),
            )
        for j, track in enumerate(tracks):
            track.point.position = problem.points[j]
        self.recon.check_invariants()
        self.stats.timings[f"ba_{tag}"] = (
            self.stats.timings.get(f"ba_{tag}", 0.0) + time.perf_counter() - t0
        )
        logger.debug(
            "%s BA: %d iters, cost %.4g -> %.4g",
            tag,
            result.iterations,
            result.initial_cost.total,
            result.final_cost.total,
        )
        return result

    # -- registration loop ----------------------------------------------------

    def _pnp_data_for(self, view_id: int):
        """Triangulated-track observations of a (usually unregistered) view."""
        world, pixels, tids = [], [], []
        for tid, kp_id in self.view_observations.get(view_id, []):
            track = self.track_by_id[tid]
            if track.point is None:
                continue
            world.append(track.point.position)
            pixels.append(self.model.keypoints[view_id][kp_id])
            tids.append(tid)
        return np.array(world), np.array(pixels), tids

    def _prior_context(self, view_id: int) -> tuple[pnp.PosePriorContext | None, PoseSE3 | None]:
        prior = self.priors.get(view_id)
        if prior is None:
            return None, None
        cfg = self.cfg.priors
        ctx = pnp.PosePriorContext()
        if cfg.lambda_t > 0:
            w_t, _ = ba.confidence_weights(self.view_match_counts.get(view_id, 0), 0, cfg)
            ctx.trans_target = np.array([prior.x, prior.y])
            ctx.trans_weight = float(np.sqrt(cfg.lambda_t * w_t * prior.confidence))
        z = self.cfg.z_seed(self.recon.views[view_id].altitude_class)
        for other in sorted(self.recon.registered_ids):
            if other == view_id or other not in self.priors:
                continue
            key = (min(view_id, other), max(view_id, other))
            n_edge = self.pair_match_counts.get(key, 0)
            if n_edge < cfg.min_edge_matches:
                continue
            po = self.priors[other]
            conf = math.sqrt(prior.confidence * po.confidence)
            other_pose = self.recon.views[other].pose
            this_is_j = view_id > other
            if cfg.lambda_r > 0:
                _, w_r = ba.confidence_weights(0, n_edge, cfg)
                weight = math.sqrt(cfg.lambda_r * w_r * conf)
                if this_is_j:
                    target = yaw_rotation(prior.yaw) @ yaw_rotation(po.yaw).T
                else:
                    target = yaw_rotation(po.yaw) @ yaw_rotation(prior.yaw).T
                ctx.rot_edges.append((other_pose.rotation, target, this_is_j, weight))
            if cfg.lambda_m > 0:
                zo = self.cfg.z_seed(self.recon.views[other].altitude_class)
                weight = math.sqrt(cfg.lambda_m * conf)
                this_lift = np.array([prior.x, prior.y, z])
                other_lift = np.array([po.x, po.y, zo])
                this_is_i = view_id < other
                target = (this_lift - other_lift) if this_is_i else (other_lift - this_lift)
                ctx.relmot_edges.append(
                    (other_pose.translation, target, this_is_i, weight)
                )
        return ctx, prior_to_initial_pose(prior, z)

    def provisional_pnp(self, view_id: int) -> PnPResultView | None:
        world, pixels, _ = self._pnp_data_for(view_id)
        if len(world) < 4:
            return None
        ctx, prior_pose = self._prior_context(view_id)
        try:
            result = pnp.register_view_pnp(
                world,
                pixels,
                self.recon.views[view_id].intrinsics,
                self.cfg.pnp,
                self._pair_rng(202, view_id, len(self.registration_order)),
                prior_pose=prior_pose,
                prior=ctx,
            )
        except pnp.PnPError:
            return None
        prior = self.priors.get(view_id)
        if prior is not None and self.cfg.prior_position_gate is not None:
            offset = float(
                np.linalg.norm(result.pose.translation[:2] - np.array([prior.x, prior.y]))
            )
            if offset > self.cfg.prior_position_gate:
                self.stats.log_event(
                    f"view {view_id}: pose {offset:.1f} m from its prior, rejected"
                )
                return None
        return PnPResultView(result, pose_uncertainty(result))

    def _visible_triangulated(self, view_id: int) -> tuple[float, int]:
        """(weighted, raw) count of triangulated tracks this view observes."""
        total = 0.0
        count = 0
        for tid, _ in self.view_observations.get(view_id, []):
            if self.track_by_id[tid].point is None:
                continue
            count += 1
            if self.cfg.nbv.feature_weight_mode == "score_weighted":
                total += self.track_scores.get(tid, 1.0)
            else:
                total += 1.0
        return total, count

    def nbv_candidates(self) -> list[int]:
        out = []
        for vid in sorted(self.recon.views):
            if vid in self.recon.registered_ids:
                continue
            if self._visible_triangulated(vid)[1] >= 4:
                out.append(vid)
        return out

    def next_best_view(
        self, candidates: list[int], pnp_results: dict[int, PnPResultView | None]
    ) -> int | None:
        """Maximize weighted track visibility minus scaled pose uncertainty."""
        if not candidates:
            return None
        visibility: dict[int, float] = {}
        obs_count: dict[int, int] = {}
        for vid in candidates:
            visibility[vid], obs_count[vid] = self._visible_triangulated(vid)
        uncs = np.array(
            [
                pnp_results[v].uncertainty
                for v in candidates
                if pnp_results.get(v) is not None
            ]
        )
        median_unc = float(np.median(uncs)) if len(uncs) else 1.0
        scale = median_unc if median_unc > 1e-300 else 1.0

        best = None
        best_key = None
        for vid in candidates:
            res = pnp_results.get(vid)
            if res is None:
                score = -np.inf
            else:
                score = visibility[vid] - self.cfg.nbv.nbv_lambda * (res.uncertainty / scale)
            key = (-score, -obs_count[vid], vid)
            if best_key is None or key < best_key:
                best_key = key
                best = vid
        if best is None or pnp_results.get(best) is None:
            return None
        return best

    # -- main loop ------------------------------------------------------------

    def run(self) -> Reconstruction:
        t_start = time.perf_counter()
        self.bootstrap_intrinsics()
        self.verify_pairs()
        self.build_track_graph()

        init_candidates = [
            k
            for k, g in self.pair_geometry.items()
            if g.usable and g.n_matches >= self.cfg.min_init_matches
        ]
        self.flag_low_parallax(init_candidates)
        init_pair = select_initial_pair(
            self.pair_geometry, self.cfg.min_init_matches, self.cfg.min_init_inlier_ratio
        )
        self.stats.log_event(f"initial pair: {init_pair}")
        self._seed_initial_pair(init_pair)
        self.triangulate_pending()
        if not self.recon.triangulated_tracks():
            raise NoValidPairError("initial pair produced no admissible structure")
        self.run_ba(None, "global")

        registrations_since_global = 0
        while True:
            candidates = self.nbv_candidates()
            if not candidates:
                break
            pnp_results = {}
            with ThreadPoolExecutor(max_workers=self._workers) as pool:
                for vid, res in zip(
                    candidates, pool.map(self.provisional_pnp, candidates)
                ):
                    pnp_results[vid] = res
            registered_this_round = False
            while candidates:
                choice = self.next_best_view(candidates, pnp_results)
                if choice is None:
                    break
                result = pnp_results[choice].result
                self.recon.register(choice, result.pose)
                self._attach_registered_view(choice)
                self.registration_order.append(choice)
                self.stats.log_event(
                    f"registered view {choice} with {result.inlier_count} PnP inliers"
                )
                registered_this_round = True
                break
            if not registered_this_round:
                break
            self.triangulate_pending()
            window = set(self.registration_order[-self.cfg.local_ba_window:])
            self.run_ba(window, "local")
            registrations_since_global += 1
            if registrations_since_global >= self.cfg.global_ba_interval:
                self.run_ba(None, "global")
                self.prune_observations()
                self.triangulate_pending()
                registrations_since_global = 0

        self.run_ba(None, "global", final=True)
        if self.prune_observations():
            self.triangulate_pending()
            self.run_ba(None, "global", final=True)
        self.recon.check_invariants()
        self.stats.counts["views_registered"] = len(self.recon.registered_ids)
        self.stats.counts["views_input"] = len(self.recon.views)
        self.stats.counts["points"] = len(self.recon.triangulated_tracks())
        self.stats.timings["total"] = time.perf_counter() - t_start
        return self.recon


def run_incremental(
    model: SceneModel,
    priors=None,
    cfg: EngineConfig | None = None,
) -> tuple[Reconstruction, RunStats]:
    """Run the full incremental pipeline on a parsed scene."""
    engine = IncrementalEngine(model, priors, cfg)
    recon = engine.run()
    return recon, engine.stats

"""Synthetic multi-altitude scenes with exact ground truth.

Ground cameras sit on a perimeter ring looking inward; aerial cameras sit on
an elevated grid pitched down. Landmarks fill a box; observations are exact
projections plus optional Gaussian pixel noise; a configurable fraction of
matches is re-drawn uniformly as labeled outliers, and priors get Gaussian
noise plus labeled far-off outliers. Everything is deterministic in the seed
and written in the pipeline's input formats plus a label sidecar.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .fileio import GeometricPrior, GroundTruthPosition, LABELS_HEADER
from .geometry import look_rotation
from .model import CameraIntrinsics, PoseSE3, SceneModel, View

_FRUSTUM_HALF_ANGLE = math.radians(30.0)  # 60 degree horizontal field of view


class SyntheticError(ValueError):
    pass


@dataclass
class SceneSpec:
    n_ground: int = 12
    n_aerial: int = 8
    n_points: int = 600
    extent: float = 60.0  # box side length, meters
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    prior_noise_xy: float = 0.0  # meters
    prior_noise_yaw: float = 0.0  # radians
    prior_outlier_fraction: float = 0.0
    rng_seed: int = 0
    # geometry knobs
    image_width: int = 1280
    image_height: int = 960
    focal_factor: float = 1.2  # true focal = factor * max(W, H)
    ground_height: float = 1.7
    aerial_height: float = 30.0
    ring_radius_factor: float = 0.8  # ground ring radius = factor * extent
    crossband_pair_cap: int | None = None  # max matches kept per ground-aerial pair
    crossband_gateways: int | None = None  # keep cross-band pairs only for the
    # K aerial views with the most cross-band co-visibility (weak-seam scenes)
    crossband_outlier_fraction: float | None = None  # overrides outlier_fraction
    # on cross-band pairs, emulating viewpoint-change mismatch rates
    crossband_patch_radius: float | None = None  # restrict cross-band matches to
    # landmarks within this radius of the shared-visibility centroid
    symmetric_landmarks: bool = False  # duplicate landmarks under a 180-degree
    # rotation about +Z, emulating repetitive architecture
    crossband_confusion_fraction: float = 0.0  # fraction of cross-band matches
    # redirected to the rotational twin landmark (labeled outliers); requires
    # symmetric_landmarks
    match_score_range: tuple[float, float] = (0.4, 1.0)

    def __post_init__(self) -> None:
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise SyntheticError(f"outlier_fraction {self.outlier_fraction} outside [0, 1)")
        if not (0.0 <= self.prior_outlier_fraction < 1.0):
            raise SyntheticError(
                f"prior_outlier_fraction {self.prior_outlier_fraction} outside [0, 1)"
            )
        for name in ("pixel_noise_sigma", "prior_noise_xy", "prior_noise_yaw"):
            if getattr(self, name) < 0:
                raise SyntheticError(f"{name} must be >= 0")
        if self.n_ground + self.n_aerial < 2:
            raise SyntheticError("need at least two cameras")
        if self.n_points < 8:
            raise SyntheticError("need at least 8 landmarks")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    poses: dict[int, PoseSE3]  # ground truth camera-to-world
    intrinsics: dict[int, CameraIntrinsics]
    landmarks: np.ndarray  # (n_points, 3)
    model: SceneModel  # what the pipeline will parse back
    priors: list[GeometricPrior]
    ground_truth: list[GroundTruthPosition]
    outlier_matches: set[tuple[int, int, int, int]]  # (view_a, view_b, kp_a, kp_b)
    prior_outliers: set[int]
    keypoint_landmark: dict[int, dict[int, int]] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)


def _camera_layout(spec: SceneSpec, rng: np.random.Generator):
    """Ground-truth poses, headings, and altitude classes for every view."""
    poses: dict[int, PoseSE3] = {}
    classes: dict[int, str] = {}
    headings: dict[int, float] = {}
    center = np.array([0.0, 0.0, spec.extent * 0.1])
    radius = spec.ring_radius_factor * spec.extent
    for i in range(spec.n_ground):
        ang = 2.0 * math.pi * i / spec.n_ground
        pos = np.array(
            [radius * math.cos(ang), radius * math.sin(ang), spec.ground_height]
        )
        forward = center - pos
        forward[2] = 0.0  # level gaze; the box is mostly below the horizon line
        R = look_rotation(forward)
        poses[i] = PoseSE3(R, pos)
        classes[i] = "ground"
        headings[i] = math.atan2(forward[1], forward[0])
    side = max(1, int(math.ceil(math.sqrt(spec.n_aerial))))
    k = 0
    for gy in range(side):
        for gx in range(side):
            if k >= spec.n_aerial:
                break
            vid = spec.n_ground + k
            fx = (gx + 0.5) / side - 0.5
            fy = (gy + 0.5) / side - 0.5
            pos = np.array(
                [fx * spec.extent * 1.2, fy * spec.extent * 1.2, spec.aerial_height]
            )
            to_center = center[:2] - pos[:2]
            if np.linalg.norm(to_center) < 1e-6:
                heading = 0.0
            else:
                heading = math.atan2(to_center[1], to_center[0])
            pitch = math.radians(rng.uniform(45.0, 80.0))
            forward = np.array(
                [
                    math.cos(pitch) * math.cos(heading),
                    math.cos(pitch) * math.sin(heading),
                    -math.sin(pitch),
                ]
            )
            poses[vid] = PoseSE3(look_rotation(forward), pos)
            classes[vid] = "aerial"
            headings[vid] = heading
            k += 1
    return poses, classes, headings


def _visible_projections(
    pose: PoseSE3, intr: CameraIntrinsics, landmarks: np.ndarray, width: int, height: int
):
    """Indices and exact pixel projections of landmarks inside the frustum."""
    q = (landmarks - pose.translation) @ pose.rotation  # camera coordinates
    depth = q[:, 2]
    ok = depth > 1e-6
    horiz = np.abs(np.arctan2(q[:, 0], np.where(ok, depth, 1.0))) <= _FRUSTUM_HALF_ANGLE
    ok &= horiz
    safe = np.where(ok, depth, 1.0)
    cx, cy = intr.principal_point
    u = intr.focal * q[:, 0] / safe + cx
    v = intr.focal * q[:, 1] / safe + cy
    margin = 1.0
    ok &= (u >= margin) & (u < width - margin) & (v >= margin) & (v < height - margin)
    return np.flatnonzero(ok), np.column_stack([u, v])[ok]


def _generate_once(spec: SceneSpec, rng: np.random.Generator) -> SyntheticScene:
    poses, classes, headings = _camera_layout(spec, rng)
    half = spec.extent / 2.0
    if spec.symmetric_landmarks:
        n_base = (spec.n_points + 1) // 2
        base = np.column_stack(
            [
                rng.uniform(-half, half, n_base),
                rng.uniform(-half, half, n_base),
                rng.uniform(0.0, spec.extent * 0.25, n_base),
            ]
        )
        twins = base * np.array([-1.0, -1.0, 1.0])
        landmarks = np.empty((2 * n_base, 3))
        landmarks[0::2] = base
        landmarks[1::2] = twins
        landmarks = landmarks[: spec.n_points]
    else:
        landmarks = np.column_stack(
            [
                rng.uniform(-half, half, spec.n_points),
                rng.uniform(-half, half, spec.n_points),
                rng.uniform(0.0, spec.extent * 0.25, spec.n_points),
            ]
        )
    focal = spec.focal_factor * max(spec.image_width, spec.image_height)

    model = SceneModel()
    intrinsics: dict[int, CameraIntrinsics] = {}
    keypoint_landmark: dict[int, dict[int, int]] = {}
    landmark_keypoint: dict[int, dict[int, int]] = {}
    for vid in sorted(poses):
        intr = CameraIntrinsics.default_for(spec.image_width, spec.image_height, focal)
        intrinsics[vid] = intr
        name = f"{classes[vid][0]}{vid:03d}"
        model.views[vid] = View(
            view_id=vid,
            name=name,
            width=spec.image_width,
            height=spec.image_height,
            altitude_class=classes[vid],
        )
        idx, uv = _visible_projections(
            poses[vid], intr, landmarks, spec.image_width, spec.image_height
        )
        if spec.pixel_noise_sigma > 0:
            uv = uv + rng.normal(scale=spec.pixel_noise_sigma, size=uv.shape)
        inside = (
            (uv[:, 0] >= 0)
            & (uv[:, 0] < spec.image_width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < spec.image_height)
        )
        idx, uv = idx[inside], uv[inside]
        if len(idx) == 0:
            raise SyntheticError(f"view {vid} sees no landmarks")
        model.keypoints[vid] = {}
        keypoint_landmark[vid] = {}
        landmark_keypoint[vid] = {}
        for kp_id, (lm, pt) in enumerate(zip(idx, uv)):
            model.keypoints[vid][kp_id] = pt.copy()
            keypoint_landmark[vid][kp_id] = int(lm)
            landmark_keypoint[vid][int(lm)] = kp_id

    # pairwise matches over co-visible landmarks
    outlier_labels: set[tuple[int, int, int, int]] = set()
    view_ids = sorted(poses)
    lo, hi = spec.match_score_range
    from .model import MatchPair

    gateway_views: set[int] | None = None
    if spec.crossband_gateways is not None:
        covis = {}
        for vid in view_ids:
            if classes[vid] != "aerial":
                continue
            covis[vid] = sum(
                len(set(landmark_keypoint[vid]) & set(landmark_keypoint[g]))
                for g in view_ids
                if classes[g] == "ground"
            )
        ranked = sorted(covis, key=lambda v: (-covis[v], v))
        gateway_views = set(ranked[: spec.crossband_gateways])

    patch_landmarks: set[int] | None = None
    if spec.crossband_patch_radius is not None:
        seen_ground = set().union(
            *(set(landmark_keypoint[v]) for v in view_ids if classes[v] == "ground")
        )
        seen_aerial = set().union(
            *(set(landmark_keypoint[v]) for v in view_ids if classes[v] == "aerial")
        )
        shared = sorted(seen_ground & seen_aerial)
        if shared:
            centroid = landmarks[shared].mean(axis=0)
            dist = np.linalg.norm(landmarks[shared] - centroid, axis=1)
            patch_landmarks = {
                lm for lm, d in zip(shared, dist) if d <= spec.crossband_patch_radius
            }

    for ai in range(len(view_ids)):
        for bi in range(ai + 1, len(view_ids)):
            va, vb = view_ids[ai], view_ids[bi]
            common = sorted(
                set(landmark_keypoint[va]) & set(landmark_keypoint[vb])
            )
            if len(common) < 2:
                continue
            crossband = classes[va] != classes[vb]
            if crossband and gateway_views is not None:
                if va not in gateway_views and vb not in gateway_views:
                    continue
            if crossband and patch_landmarks is not None:
                common = [lm for lm in common if lm in patch_landmarks]
                if len(common) < 2:
                    continue
            if crossband and spec.crossband_pair_cap is not None:
                if len(common) > spec.crossband_pair_cap:
                    keep = rng.choice(len(common), spec.crossband_pair_cap, replace=False)
                    common = [common[i] for i in sorted(keep)]
            indices = np.array(
                [(landmark_keypoint[va][lm], landmark_keypoint[vb][lm]) for lm in common],
                dtype=int,
            )
            scores = rng.uniform(lo, hi, size=len(common))
            if (
                crossband
                and spec.symmetric_landmarks
                and spec.crossband_confusion_fraction > 0
            ):
                # redirect the first-view (ground) endpoint to the rotational
                # twin landmark: the aerial image is "recognized" at the
                # half-turn-symmetric location, as repetitive structure causes
                n_conf = int(round(spec.crossband_confusion_fraction * len(common)))
                if n_conf:
                    chosen = rng.choice(len(common), size=n_conf, replace=False)
                    used_a = set(indices[:, 0].tolist())
                    row_of = {lm: r for r, lm in enumerate(common)}
                    done: set[int] = set()
                    for row in sorted(chosen):
                        if row in done:
                            continue
                        twin = common[row] ^ 1  # rotational twin of landmark 2k is 2k+1
                        ka_twin = landmark_keypoint[va].get(twin)
                        if ka_twin is None or ka_twin == indices[row, 0]:
                            continue
                        row2 = row_of.get(twin)
                        if row2 is not None:
                            indices[row, 0], indices[row2, 0] = (
                                indices[row2, 0],
                                indices[row, 0],
                            )
                            done.update((row, row2))
                            for r in (row, row2):
                                outlier_labels.add(
                                    (va, vb, int(indices[r, 0]), int(indices[r, 1]))
                                )
                        elif ka_twin not in used_a:
                            used_a.discard(int(indices[row, 0]))
                            used_a.add(int(ka_twin))
                            indices[row, 0] = ka_twin
                            done.add(row)
                            outlier_labels.add((va, vb, int(ka_twin), int(indices[row, 1])))
            out_frac = spec.outlier_fraction
            if crossband and spec.crossband_outlier_fraction is not None:
                out_frac = spec.crossband_outlier_fraction
            if out_frac > 0:
                n_out = int(round(out_frac * len(common)))
                if n_out:
                    chosen = rng.choice(len(common), size=n_out, replace=False)
                    all_b = sorted(model.keypoints[vb])
                    used_b = set(indices[:, 1].tolist())
                    for row in sorted(chosen):
                        true_b = indices[row, 1]
                        used_b.discard(int(true_b))
                        for _ in range(50):
                            cand = all_b[int(rng.integers(len(all_b)))]
                            if cand not in used_b and cand != true_b:
                                break
                        else:
                            used_b.add(int(true_b))
                            continue
                        indices[row, 1] = cand
                        used_b.add(cand)
                        outlier_labels.add((va, vb, int(indices[row, 0]), int(cand)))
            model.matches[(va, vb)] = MatchPair(va, vb, indices, scores)

    # priors: true horizontal pose plus noise, with labeled gross outliers
    priors: list[GeometricPrior] = []
    prior_outliers: set[int] = set()
    n_prior_out = int(round(spec.prior_outlier_fraction * len(view_ids)))
    out_views = set(
        int(v) for v in rng.choice(view_ids, size=n_prior_out, replace=False)
    ) if n_prior_out else set()
    sigma_xy_eff = max(spec.prior_noise_xy, 0.5)
    sigma_yaw_eff = max(spec.prior_noise_yaw, math.radians(2.0))
    for vid in view_ids:
        x, y = poses[vid].translation[:2]
        yaw = headings[vid]
        if spec.prior_noise_xy > 0:
            x += rng.normal(scale=spec.prior_noise_xy)
            y += rng.normal(scale=spec.prior_noise_xy)
        if spec.prior_noise_yaw > 0:
            yaw += rng.normal(scale=spec.prior_noise_yaw)
        if vid in out_views:
            direction = rng.uniform(0.0, 2.0 * math.pi)
            dist = (10.0 + abs(rng.normal())) * sigma_xy_eff
            x += dist * math.cos(direction)
            y += dist * math.sin(direction)
            yaw += (10.0 + abs(rng.normal())) * sigma_yaw_eff * (
                1.0 if rng.random() < 0.5 else -1.0
            )
            prior_outliers.add(vid)
        yaw = math.atan2(math.sin(yaw), math.cos(yaw))
        priors.append(GeometricPrior(vid, float(x), float(y), float(yaw)))

    ground_truth = [
        GroundTruthPosition(vid, poses[vid].translation.copy()) for vid in view_ids
    ]
    return SyntheticScene(
        spec=spec,
        poses=poses,
        intrinsics=intrinsics,
        landmarks=landmarks,
        model=model,
        priors=priors,
        ground_truth=ground_truth,
        outlier_matches=outlier_labels,
        prior_outliers=prior_outliers,
        keypoint_landmark=keypoint_landmark,
    )


def write_labels(scene: SyntheticScene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{LABELS_HEADER}\n")
        for va, vb, ka, kb in sorted(scene.outlier_matches):
            fh.write(f"O {va} {vb} {ka} {kb}\n")
        for vid in sorted(scene.prior_outliers):
            fh.write(f"PO {vid}\n")


def parse_labels(path) -> tuple[set[tuple[int, int, int, int]], set[int]]:
    outliers: set[tuple[int, int, int, int]] = set()
    prior_outliers: set[int] = set()
    lines = fileio._tokenized_lines(path)
    fileio._check_header(path, lines, LABELS_HEADER)
    for line_no, tok in lines:
        if tok[0] == "O" and len(tok) == 5:
            outliers.add((int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4])))
        elif tok[0] == "PO" and len(tok) == 2:
            prior_outliers.add(int(tok[1]))
        else:
            raise fileio.ParseError(path, line_no, f"unknown label record {tok[0]!r}")
    return outliers, prior_outliers


def generate_scene(spec: SceneSpec, out_dir=None) -> SyntheticScene:
    """Generate a scene, retrying with reseeded draws if a view sees nothing.

    When ``out_dir`` is given, the correspondence, prior, ground-truth, and
    label files are written there.
    """
    last_error = None
    for attempt in range(10):
        rng = np.random.default_rng([spec.rng_seed, attempt])
        try:
            scene = _generate_once(spec, rng)
            break
        except SyntheticError as exc:
            last_error = exc
            warnings.warn(f"scene attempt {attempt} failed ({exc}); regenerating")
    else:
        raise SyntheticError(f"no valid scene after 10 attempts: {last_error}")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        scene.paths = {
            "correspondences": os.path.join(out_dir, "correspondences.txt"),
            "priors": os.path.join(out_dir, "priors.txt"),
            "ground_truth": os.path.join(out_dir, "ground_truth.txt"),
            "labels": os.path.join(out_dir, "labels.txt"),
        }
        fileio.write_correspondences(scene.model, scene.paths["correspondences"])
        fileio.write_priors(scene.priors, scene.paths["priors"])
        fileio.write_ground_truth(scene.ground_truth, scene.paths["ground_truth"])
        write_labels(scene, scene.paths["labels"])
    return scene

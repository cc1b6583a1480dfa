"""Scene-graph data model and multi-view track building.

The model is deliberately plain: dataclasses plus numpy arrays, mutated by
exactly one pipeline stage at a time. Everything here is safe to share
read-only between parallel workers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import is_rotation

logger = logging.getLogger(__name__)

ALTITUDE_CLASSES = ("ground", "aerial", "satellite")


class ModelError(ValueError):
    """Raised when a model invariant is violated."""


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics with a single radial distortion coefficient."""

    focal: float
    principal_point: tuple[float, float]
    radial_distortion: float = 0.0

    def __post_init__(self) -> None:
        if not self.focal > 0:
            raise ModelError(f"focal length must be positive, got {self.focal}")

    @classmethod
    def default_for(cls, width: int, height: int, focal: float) -> "CameraIntrinsics":
        return cls(focal=focal, principal_point=(width / 2.0, height / 2.0))

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


@dataclass
class PoseSE3:
    """Camera-to-world rotation plus camera center in the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def validate(self, atol: float = 1e-9) -> None:
        if not is_rotation(self.rotation, atol=atol):
            raise ModelError("pose rotation is not orthonormal with det +1")
        if not np.all(np.isfinite(self.translation)):
            raise ModelError("pose translation is not finite")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.translation) @ self.rotation

    def projection_matrix(self, K: np.ndarray) -> np.ndarray:
        Rwc = self.rotation.T
        return K @ np.hstack([Rwc, (-Rwc @ self.translation)[:, None]])

    def copy(self) -> "PoseSE3":
        return PoseSE3(self.rotation.copy(), self.translation.copy())


@dataclass
class View:
    view_id: int
    name: str
    width: int
    height: int
    altitude_class: str
    intrinsics: CameraIntrinsics | None = None
    pose: PoseSE3 | None = None
    camera_group: str | None = None  # views in one group share intrinsics in BA

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ModelError(f"view {self.view_id}: non-positive image dimensions")
        if self.altitude_class not in ALTITUDE_CLASSES:
            raise ModelError(
                f"view {self.view_id}: altitude class {self.altitude_class!r} "
                f"not one of {ALTITUDE_CLASSES}"
            )

    @property
    def is_registered(self) -> bool:
        return self.pose is not None


@dataclass
class MatchPair:
    """Pairwise correspondences between two views, canonically ordered."""

    view_a: int
    view_b: int
    indices: np.ndarray  # (N, 2) int: keypoint ids in view_a, view_b
    scores: np.ndarray  # (N,) float in [0, 1]

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=int).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.view_a >= self.view_b:
            raise ModelError(f"match pair ({self.view_a}, {self.view_b}) not in canonical order")
        if len(self.indices) != len(self.scores):
            raise ModelError("match indices and scores length mismatch")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ModelError("match scores outside [0, 1]")
        for side in (0, 1):
            col = self.indices[:, side]
            if len(np.unique(col)) != len(col):
                raise ModelError(
                    f"pair ({self.view_a}, {self.view_b}): keypoint repeated on side {side}"
                )

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class Point3D:
    position: np.ndarray
    color: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ModelError("3D point coordinates must be finite")


@dataclass
class Track:
    """Keypoints across several views that correspond to one scene point."""

    track_id: int
    observations: list[tuple[int, int]]  # (view_id, keypoint_id), each view once
    point: Point3D | None = None

    def view_ids(self) -> list[int]:
        return [v for v, _ in self.observations]


@dataclass
class SceneModel:
    """Parsed input scene: views, per-view keypoints, and pairwise matches."""

    views: dict[int, View] = field(default_factory=dict)
    keypoints: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)
    matches: dict[tuple[int, int], MatchPair] = field(default_factory=dict)

    def keypoint(self, view_id: int, keypoint_id: int) -> np.ndarray:
        return self.keypoints[view_id][keypoint_id]

    def match_positions(self, pair: MatchPair) -> tuple[np.ndarray, np.ndarray]:
        kps_a = self.keypoints[pair.view_a]
        kps_b = self.keypoints[pair.view_b]
        pts_a = np.array([kps_a[i] for i in pair.indices[:, 0]], dtype=float).reshape(-1, 2)
        pts_b = np.array([kps_b[i] for i in pair.indices[:, 1]], dtype=float).reshape(-1, 2)
        return pts_a, pts_b


@dataclass
class Reconstruction:
    """The evolving output scene graph."""

    views: dict[int, View]
    tracks: list[Track] = field(default_factory=list)
    registered_ids: set[int] = field(default_factory=set)
    keypoints: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)

    def observation_pixel(self, view_id: int, keypoint_id: int) -> np.ndarray:
        return self.keypoints[view_id][keypoint_id]

    def register(self, view_id: int, pose: PoseSE3) -> None:
        pose.validate()
        self.views[view_id].pose = pose
        self.registered_ids.add(view_id)

    def triangulated_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.point is not None]

    def check_invariants(self) -> None:
        if not self.registered_ids <= set(self.views):
            raise ModelError("registered_ids contains unknown view ids")
        for vid in self.registered_ids:
            pose = self.views[vid].pose
            if pose is None:
                raise ModelError(f"registered view {vid} has no pose")
            pose.validate()
        for track in self.tracks:
            if track.point is None:
                continue
            for view_id, _ in track.observations:
                if view_id not in self.registered_ids:
                    raise ModelError(
                        f"track {track.track_id} observes unregistered view {view_id}"
                    )


@dataclass
class TrackBuildResult:
    tracks: list[Track]
    dropped_components: int
    dropped_observations: int


class _UnionFind:
    """Union by size with path compression over arbitrary hashable keys."""

    def __init__(self) -> None:
        self.parent: dict = {}
        self.size: dict = {}

    def find(self, x):
        root = x
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size.get(ra, 1) < self.size.get(rb, 1):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] = self.size.get(ra, 1) + self.size.get(rb, 1)


def build_tracks(matches: dict[tuple[int, int], MatchPair]) -> TrackBuildResult:
    """Merge pairwise matches into multi-view tracks.

    Connected components of the keypoint-correspondence graph become tracks.
    A component containing two distinct keypoints of the same view is
    internally inconsistent and dropped whole (conservative: the offending
    match cannot be identified without extra geometry).
    """
    uf = _UnionFind()
    for (view_a, view_b) in sorted(matches):
        pair = matches[(view_a, view_b)]
        for kp_a, kp_b in pair.indices:
            uf.union((view_a, int(kp_a)), (view_b, int(kp_b)))

    components: dict = {}
    for key in uf.parent:
        components.setdefault(uf.find(key), []).append(key)

    tracks: list[Track] = []
    dropped_components = 0
    dropped_observations = 0
    next_id = 0
    for root in sorted(components):
        members = sorted(components[root])
        view_ids = [v for v, _ in members]
        if len(set(view_ids)) != len(view_ids):
            dropped_components += 1
            dropped_observations += len(members)
            continue
        if len(members) < 2:
            continue
        tracks.append(Track(track_id=next_id, observations=members))
        next_id += 1

    if dropped_components:
        logger.info(
            "track building dropped %d inconsistent components (%d observations)",
            dropped_components,
            dropped_observations,
        )
    return TrackBuildResult(tracks, dropped_components, dropped_observations)

"""Parsers and writers for the pipeline's text file formats.

Formats (UTF-8, '#' starts a comment, tokens whitespace-separated):

* correspondences  ``CVDSFM-CORR 1`` header, then
    ``V <view_id> <name> <width> <height> <altitude_class>``
    ``K <view_id> <keypoint_id> <u> <v>``
    ``M <view_a> <view_b> <kp_a> <kp_b> <score>``
* priors           ``CVDSFM-PRIOR 1`` header, ``P <view_id> <x> <y> <yaw> [confidence]``
* ground truth     ``CVDSFM-GT 1`` header, ``G <view_id> <lat> <lon> <alt>`` (WGS84)
                   or ``GL <view_id> <x> <y> <z>`` (already local ENU)
* poses output     ``<view_id> <qw> <qx> <qy> <qz> <tx> <ty> <tz> <focal>`` rows
* point cloud      ASCII PLY with x, y, z, red, green, blue
* report           ``<key> = <value>`` lines

All numeric output uses 12 significant digits so that write/parse round-trips
are lossless at that precision.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import normalize_angle, quaternion_to_rotation, rotation_to_quaternion
from .model import (
    CameraIntrinsics,
    MatchPair,
    ModelError,
    PoseSE3,
    Reconstruction,
    SceneModel,
    View,
)

CORR_HEADER = "CVDSFM-CORR 1"
PRIOR_HEADER = "CVDSFM-PRIOR 1"
GT_HEADER = "CVDSFM-GT 1"
LABELS_HEADER = "CVDSFM-LABELS 1"

# WGS84 ellipsoid
_WGS84_A = 6378137.0
_WGS84_E2 = 6.69437999014e-3


class ParseError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class FormatWarning(UserWarning):
    """Recoverable anomaly in an input file (value normalized or suspect)."""


@dataclass
class GeometricPrior:
    """Horizontal position and yaw of one view from cross-view localization."""

    view_id: int
    x: float
    y: float
    yaw: float  # radians, CCW about +Z from +X, in (-pi, pi]
    confidence: float = 1.0


@dataclass
class GroundTruthPosition:
    view_id: int
    position: np.ndarray  # (3,) meters, local ENU

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ModelError("ground-truth position must be finite")


def _tokenized_lines(path):
    """Yield (line_no, tokens) for non-empty, non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            yield line_no, line.split()


def _check_header(path, lines, expected: str):
    try:
        line_no, tokens = next(lines)
    except StopIteration:
        raise ParseError(path, 1, f"missing header, expected {expected!r}") from None
    if tokens != expected.split():
        raise ParseError(path, line_no, f"bad header, expected {expected!r}")


def parse_correspondences(path, min_score: float = 0.0) -> SceneModel:
    """Parse views, keypoints, and matches; verify referential integrity.

    Matches with score below ``min_score`` are dropped at ingestion.
    """
    model = SceneModel()
    raw_matches: dict[tuple[int, int], list[tuple[int, int, float]]] = {}
    lines = _tokenized_lines(path)
    _check_header(path, lines, CORR_HEADER)

    for line_no, tok in lines:
        kind = tok[0]
        try:
            if kind == "V":
                if len(tok) != 6:
                    raise ValueError("expected: V <id> <name> <width> <height> <class>")
                vid = int(tok[1])
                if vid in model.views:
                    raise ValueError(f"duplicate view id {vid}")
                model.views[vid] = View(
                    view_id=vid,
                    name=tok[2],
                    width=int(tok[3]),
                    height=int(tok[4]),
                    altitude_class=tok[5],
                )
                model.keypoints[vid] = {}
            elif kind == "K":
                if len(tok) != 5:
                    raise ValueError("expected: K <view_id> <keypoint_id> <u> <v>")
                vid, kid = int(tok[1]), int(tok[2])
                u, v = float(tok[3]), float(tok[4])
                view = model.views.get(vid)
                if view is None:
                    raise ValueError(f"keypoint references unknown view {vid}")
                if kid in model.keypoints[vid]:
                    raise ValueError(f"duplicate keypoint id {kid} in view {vid}")
                if not (0.0 <= u < view.width and 0.0 <= v < view.height):
                    raise ValueError(f"keypoint ({u}, {v}) outside image bounds of view {vid}")
                model.keypoints[vid][kid] = np.array([u, v])
            elif kind == "M":
                if len(tok) != 6:
                    raise ValueError("expected: M <view_a> <view_b> <kp_a> <kp_b> <score>")
                va, vb, ka, kb = int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4])
                score = float(tok[5])
                if va >= vb:
                    raise ValueError(f"match pair ({va}, {vb}) not in canonical order (a < b)")
                for vid, kid in ((va, ka), (vb, kb)):
                    if vid not in model.views:
                        raise ValueError(f"match references unknown view {vid}")
                    if kid not in model.keypoints[vid]:
                        raise ValueError(f"match references unknown keypoint {kid} of view {vid}")
                if not 0.0 <= score <= 1.0:
                    raise ValueError(f"match score {score} outside [0, 1]")
                if score >= min_score:
                    raw_matches.setdefault((va, vb), []).append((ka, kb, score))
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (ValueError, ModelError) as exc:
            raise ParseError(path, line_no, str(exc)) from None

    for (va, vb), entries in sorted(raw_matches.items()):
        indices = np.array([(ka, kb) for ka, kb, _ in entries], dtype=int)
        scores = np.array([s for _, _, s in entries])
        try:
            model.matches[(va, vb)] = MatchPair(va, vb, indices, scores)
        except ModelError as exc:
            raise ParseError(path, 0, f"pair ({va}, {vb}): {exc}") from None
    return model


def parse_priors(path, view_ids=None) -> list[GeometricPrior]:
    """Parse geometric priors; yaw is normalized to (-pi, pi] with a warning."""
    priors: list[GeometricPrior] = []
    seen: set[int] = set()
    lines = _tokenized_lines(path)
    _check_header(path, lines, PRIOR_HEADER)
    for line_no, tok in lines:
        if tok[0] != "P" or len(tok) not in (5, 6):
            raise ParseError(path, line_no, "expected: P <view_id> <x> <y> <yaw> [confidence]")
        try:
            vid = int(tok[1])
            x, y, yaw = float(tok[2]), float(tok[3]), float(tok[4])
            confidence = float(tok[5]) if len(tok) == 6 else 1.0
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        if view_ids is not None and vid not in view_ids:
            raise ParseError(path, line_no, f"prior references unknown view {vid}")
        if vid in seen:
            raise ParseError(path, line_no, f"duplicate prior for view {vid}")
        seen.add(vid)
        if not 0.0 < confidence <= 1.0:
            raise ParseError(path, line_no, f"confidence {confidence} outside (0, 1]")
        if not -math.pi < yaw <= math.pi:
            # +/-pi written with finite precision lands a hair outside the
            # interval; snap silently, warn only about genuine excursions
            if abs(abs(yaw) - math.pi) > 1e-9:
                warnings.warn(
                    f"{path}:{line_no}: yaw {yaw} outside (-pi, pi], normalizing",
                    FormatWarning,
                )
            yaw = normalize_angle(yaw)
        priors.append(GeometricPrior(vid, x, y, yaw, confidence))
    return priors


def convert_gps_to_local(records, origin=None) -> list[GroundTruthPosition]:
    """Convert (view_id, lat, lon, alt) WGS84 records to local ENU meters.

    Tangent-plane linearization with WGS84 curvature radii at the origin
    latitude; ``origin`` defaults to the mean of the records. Sub-decimeter
    within ~1 km of the origin, and warns when the extent makes the
    linearization unreliable.
    """
    records = list(records)
    if not records:
        return []
    for vid, lat, lon, alt in records:
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise ValueError(f"view {vid}: lat/lon ({lat}, {lon}) outside WGS84 bounds")
    if origin is None:
        origin = (
            float(np.mean([r[1] for r in records])),
            float(np.mean([r[2] for r in records])),
            float(np.mean([r[3] for r in records])),
        )
    lat0, lon0, alt0 = origin
    sin_lat0 = math.sin(math.radians(lat0))
    denom = 1.0 - _WGS84_E2 * sin_lat0 * sin_lat0
    radius_meridian = _WGS84_A * (1.0 - _WGS84_E2) / denom ** 1.5
    radius_normal = _WGS84_A / math.sqrt(denom)

    out = []
    for vid, lat, lon, alt in records:
        dlon = math.radians(lon - lon0)
        if dlon > math.pi:
            dlon -= 2.0 * math.pi
        elif dlon < -math.pi:
            dlon += 2.0 * math.pi
        dlat = math.radians(lat - lat0)
        if max(abs(dlat), abs(dlon)) > 0.02:  # ~2 km angular distance
            warnings.warn(
                f"view {vid}: {111.0 * math.degrees(max(abs(dlat), abs(dlon))):.0f} km from "
                "origin; ENU tangent-plane distortion is significant",
                FormatWarning,
            )
        x = dlon * math.cos(math.radians(lat0)) * radius_normal
        y = dlat * radius_meridian
        z = alt - alt0
        out.append(GroundTruthPosition(vid, np.array([x, y, z])))
    return out


def parse_ground_truth(path, origin=None) -> list[GroundTruthPosition]:
    """Parse ground-truth positions, converting GPS records to local ENU."""
    gps_records = []
    local: list[GroundTruthPosition] = []
    lines = _tokenized_lines(path)
    _check_header(path, lines, GT_HEADER)
    for line_no, tok in lines:
        try:
            if tok[0] == "G" and len(tok) == 5:
                gps_records.append((int(tok[1]), float(tok[2]), float(tok[3]), float(tok[4])))
            elif tok[0] == "GL" and len(tok) == 5:
                local.append(
                    GroundTruthPosition(int(tok[1]), np.array([float(t) for t in tok[2:5]]))
                )
            else:
                raise ValueError("expected: G <id> <lat> <lon> <alt> or GL <id> <x> <y> <z>")
        except (ValueError, ModelError) as exc:
            raise ParseError(path, line_no, str(exc)) from None
    if gps_records:
        local.extend(convert_gps_to_local(gps_records, origin=origin))
    return local


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_correspondences(model: SceneModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CORR_HEADER}\n")
        for vid in sorted(model.views):
            v = model.views[vid]
            name = "".join(v.name.split()) or f"view{vid}"
            fh.write(f"V {vid} {name} {v.width} {v.height} {v.altitude_class}\n")
        for vid in sorted(model.keypoints):
            for kid in sorted(model.keypoints[vid]):
                u, w = model.keypoints[vid][kid]
                fh.write(f"K {vid} {kid} {_fmt(u)} {_fmt(w)}\n")
        for (va, vb) in sorted(model.matches):
            pair = model.matches[(va, vb)]
            for (ka, kb), score in zip(pair.indices, pair.scores):
                fh.write(f"M {va} {vb} {ka} {kb} {_fmt(score)}\n")


def write_priors(priors, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{PRIOR_HEADER}\n")
        for p in sorted(priors, key=lambda p: p.view_id):
            fh.write(
                f"P {p.view_id} {_fmt(p.x)} {_fmt(p.y)} {_fmt(p.yaw)} {_fmt(p.confidence)}\n"
            )


def write_ground_truth(positions, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{GT_HEADER}\n")
        for g in sorted(positions, key=lambda g: g.view_id):
            x, y, z = g.position
            fh.write(f"GL {g.view_id} {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def write_poses(reconstruction: Reconstruction, path) -> None:
    """One row per registered view: id, unit quaternion (c2w), center, focal."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# view_id qw qx qy qz tx ty tz focal\n")
        for vid in sorted(reconstruction.registered_ids):
            view = reconstruction.views[vid]
            q = rotation_to_quaternion(view.pose.rotation)
            t = view.pose.translation
            focal = view.intrinsics.focal if view.intrinsics else 0.0
            fields = [str(vid)] + [_fmt(x) for x in (*q, *t, focal)]
            fh.write(" ".join(fields) + "\n")


@dataclass
class PoseRecord:
    view_id: int
    pose: PoseSE3
    focal: float


def parse_poses(path) -> list[PoseRecord]:
    records = []
    for line_no, tok in _tokenized_lines(path):
        if len(tok) != 9:
            raise ParseError(path, line_no, "expected 9 fields: id qw qx qy qz tx ty tz focal")
        try:
            vid = int(tok[0])
            vals = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        R = quaternion_to_rotation(np.array(vals[0:4]))
        records.append(PoseRecord(vid, PoseSE3(R, np.array(vals[4:7])), vals[7]))
    return records


def write_point_cloud(reconstruction: Reconstruction, path) -> None:
    points = [t.point for t in reconstruction.tracks if t.point is not None]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p in points:
            r, g, b = p.color if p.color is not None else (255, 255, 255)
            x, y, z = p.position
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {r} {g} {b}\n")


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in report.items():
            if isinstance(value, float):
                fh.write(f"{key} = {_fmt(value)}\n")
            else:
                fh.write(f"{key} = {value}\n")


def parse_report(path) -> dict:
    out = {}
    for line_no, tok in _tokenized_lines(path):
        if len(tok) < 3 or tok[1] != "=":
            raise ParseError(path, line_no, "expected: <key> = <value>")
        raw = " ".join(tok[2:])
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                value = raw
        out[tok[0]] = value
    return out


def write_outputs(reconstruction: Reconstruction, report: dict | None, out_dir) -> dict:
    """Write poses, point cloud, and report; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "poses": os.path.join(out_dir, "poses.txt"),
        "points": os.path.join(out_dir, "points.ply"),
        "report": os.path.join(out_dir, "report.txt"),
    }
    write_poses(reconstruction, paths["poses"])
    write_point_cloud(reconstruction, paths["points"])
    write_report(report or {}, paths["report"])
    return paths

"""Evaluation metrics: similarity alignment of estimated camera positions to
ground truth, positional RMSE, pose coverage, and mean reprojection error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Reconstruction


class MetricsError(ValueError):
    pass


class DegenerateConfigurationError(MetricsError):
    """Point sets collinear or coincident; the rotation is unobservable."""


class EmptyIntersectionError(MetricsError):
    """No view has both an estimate and a ground-truth position."""


@dataclass
class SimilarityTransform:
    """y = scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.atleast_2d(points) @ self.rotation.T) + self.translation


@dataclass
class MetricsReport:
    rmse_min_m: float = float("nan")
    rmse_mean_m: float = float("nan")
    rmse_max_m: float = float("nan")
    coverage_aerial: float = float("nan")
    coverage_ground: float = float("nan")
    coverage_total: float = float("nan")
    reproj_mean_px2: float = float("nan")
    reproj_rms_px: float = float("nan")
    n_estimated: int = 0
    n_input: int = 0
    per_class_rmse: dict = field(default_factory=dict)
    per_view_errors: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "rmse_min_m": self.rmse_min_m,
            "rmse_mean_m": self.rmse_mean_m,
            "rmse_max_m": self.rmse_max_m,
            "coverage_aerial": self.coverage_aerial,
            "coverage_ground": self.coverage_ground,
            "coverage_total": self.coverage_total,
            "reproj_mean_px2": self.reproj_mean_px2,
            "reproj_rms_px": self.reproj_rms_px,
            "n_estimated": self.n_estimated,
            "n_input": self.n_input,
        }
        for cls, rmse in sorted(self.per_class_rmse.items()):
            out[f"rmse_mean_m_{cls}"] = rmse
        return out


def align_umeyama(estimated: np.ndarray, ground_truth: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform with Y ~= s R X + t.

    Umeyama's closed form; the reflection case is excluded by flipping the
    sign of the smallest singular value. Needs >= 3 non-collinear points.
    """
    X = np.asarray(estimated, dtype=float).reshape(-1, 3)
    Y = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(X) != len(Y):
        raise MetricsError("point sets must have equal length")
    n = len(X)
    if n < 3:
        raise DegenerateConfigurationError(f"need >= 3 correspondences, got {n}")
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    var_x = float(np.sum(Xc**2)) / n
    C = (Yc.T @ Xc) / n
    U, D, Vt = np.linalg.svd(C)
    # collinear or coincident sources leave >= 2 vanishing singular values
    if var_x < 1e-24 or D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfigurationError(
            "estimated points are collinear or coincident; rotation unobservable"
        )
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S)) / var_x
    if scale <= 0:
        raise DegenerateConfigurationError("non-positive scale; degenerate configuration")
    t = mu_y - scale * R @ mu_x
    return SimilarityTransform(scale=scale, rotation=R, translation=t)


def positional_rmse(
    aligned_estimates: np.ndarray, ground_truth: np.ndarray
) -> tuple[float, float, float]:
    """(min, RMSE, max) of per-view position errors, in meters.

    The middle value is the root-mean-square error; min and max are the
    per-view extrema reported alongside it.
    """
    A = np.asarray(aligned_estimates, dtype=float).reshape(-1, 3)
    G = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(A) != len(G):
        raise EmptyIntersectionError("no aligned estimate / ground-truth pairs")
    err = np.linalg.norm(A - G, axis=1)
    return float(err.min()), float(np.sqrt(np.mean(err**2))), float(err.max())


def coverage(n_estimated: int, n_input: int) -> float:
    """Fraction of input views whose poses were successfully estimated."""
    if n_input <= 0:
        raise MetricsError("n_input must be positive")
    if n_estimated > n_input:
        raise MetricsError("n_estimated cannot exceed n_input")
    return n_estimated / n_input


def _reprojection_sq_errors(reconstruction: Reconstruction) -> np.ndarray:
    from .ba import project_point  # deliberate reuse boundary: projection only

    sq = []
    for track in reconstruction.tracks:
        if track.point is None:
            continue
        for view_id, kp_id in track.observations:
            view = reconstruction.views[view_id]
            if view.pose is None or view.intrinsics is None:
                continue
            obs = reconstruction.observation_pixel(view_id, kp_id)
            uv, w = project_point(view.intrinsics, view.pose, track.point.position)
            if w <= 0:
                continue
            d = uv - obs
            sq.append(float(d @ d))
    return np.array(sq)


def mean_reprojection_error(reconstruction: Reconstruction) -> float:
    """Mean over observations of squared pixel reprojection norms (px^2).

    The root-mean variant (RMS, px) is reported alongside in the metrics
    report for comparability with pipelines that quote pixels.
    """
    sq = _reprojection_sq_errors(reconstruction)
    if len(sq) == 0:
        raise MetricsError("no triangulated observations")
    return float(np.mean(sq))


def reprojection_rms(reconstruction: Reconstruction) -> float:
    sq = _reprojection_sq_errors(reconstruction)
    if len(sq) == 0:
        raise MetricsError("no triangulated observations")
    return float(np.sqrt(np.mean(sq)))


def evaluate_positions(
    estimated: dict[int, np.ndarray],
    ground_truth: dict[int, np.ndarray],
) -> tuple[SimilarityTransform, dict[int, float]]:
    """Align estimated view positions to ground truth over the common views.

    Returns the transform and per-view aligned errors. Views estimated but
    lacking ground truth are excluded here (they still count for coverage).
    """
    common = sorted(set(estimated) & set(ground_truth))
    if len(common) < 3:
        raise EmptyIntersectionError(
            f"only {len(common)} views have both estimate and ground truth; need >= 3"
        )
    X = np.stack([estimated[v] for v in common])
    Y = np.stack([ground_truth[v] for v in common])
    transform = align_umeyama(X, Y)
    aligned = transform.apply(X)
    errors = {v: float(np.linalg.norm(aligned[i] - Y[i])) for i, v in enumerate(common)}
    return transform, errors


def build_report(
    views: dict,
    registered_ids: set[int],
    per_view_errors: dict[int, float],
    reproj_mean_px2: float | None,
    reproj_rms_px: float | None,
    include_satellite: bool = False,
    has_matches: set[int] | None = None,
) -> MetricsReport:
    """Assemble the metrics report with the paper's denominators.

    Coverage counts every input view of its class; RMSE aggregates only the
    views that have both an estimate and ground truth. Satellite views enter
    the denominators only when they have matches (or when forced by
    ``include_satellite``).
    """
    report = MetricsReport()

    def counted(view) -> bool:
        if view.altitude_class != "satellite" or include_satellite:
            return True
        return has_matches is not None and view.view_id in has_matches

    counted_views = [v for v in views.values() if counted(v)]
    report.n_input = len(counted_views)
    report.n_estimated = sum(1 for v in counted_views if v.view_id in registered_ids)
    if report.n_input:
        report.coverage_total = coverage(report.n_estimated, report.n_input)
    for cls in ("ground", "aerial"):
        cls_views = [v for v in counted_views if v.altitude_class == cls]
        if cls_views:
            cov = coverage(
                sum(1 for v in cls_views if v.view_id in registered_ids), len(cls_views)
            )
            setattr(report, f"coverage_{cls}", cov)

    if per_view_errors:
        err = np.array(list(per_view_errors.values()))
        report.rmse_min_m = float(err.min())
        report.rmse_mean_m = float(np.sqrt(np.mean(err**2)))
        report.rmse_max_m = float(err.max())
        report.per_view_errors = dict(per_view_errors)
        for cls in ("ground", "aerial", "satellite"):
            cls_err = [
                e
                for vid, e in per_view_errors.items()
                if views[vid].altitude_class == cls
            ]
            if cls_err:
                report.per_class_rmse[cls] = float(np.sqrt(np.mean(np.array(cls_err) ** 2)))
    if reproj_mean_px2 is not None:
        report.reproj_mean_px2 = reproj_mean_px2
    if reproj_rms_px is not None:
        report.reproj_rms_px = reproj_rms_px
    return report

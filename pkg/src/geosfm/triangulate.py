"""Multi-view triangulation: linear DLT initialization refined by
Levenberg-Marquardt on the pixel reprojection objective, plus the geometric
admission gate applied before points enter bundle adjustment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Point3D


class TriangulationError(RuntimeError):
    pass


class BehindCameraError(TriangulationError):
    """Optimum places the point behind at least one camera."""


class IllConditionedError(TriangulationError):
    """Observation rays nearly parallel; the DLT null space is ambiguous."""


@dataclass
class TriangulationConfig:
    max_reproj_px: float = 8.0
    min_angle_deg: float = 1.5
    max_iterations: int = 100
    rel_cost_tol: float = 1e-10
    huber_factor: float = 3.0  # Huber width = factor * max_reproj_px

    @property
    def min_angle_rad(self) -> float:
        return math.radians(self.min_angle_deg)


@dataclass
class TriangulationResult:
    point: Point3D
    mean_reprojection_error: float  # px
    min_triangulation_angle: float  # radians


def triangulate_dlt(Ps: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    """Linear triangulation from stacked cross-product constraints."""
    A = np.empty((2 * len(Ps), 4))
    for i, (P, (u, v)) in enumerate(zip(Ps, uvs)):
        A[2 * i] = u * P[2] - P[0]
        A[2 * i + 1] = v * P[2] - P[1]
    _, s, Vt = np.linalg.svd(A)
    if s[2] > 0 and s[3] / s[2] > 0.99:
        raise IllConditionedError(f"DLT singular value ratio {s[3] / s[2]:.4f} > 0.99")
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        raise IllConditionedError("DLT solution at infinity")
    return X[:3] / X[3]


def _project(Ps: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projections (N, 2) and depths w (N,) of one point through all cameras."""
    h = Ps[:, :, :3] @ X + Ps[:, :, 3]
    w = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / w[:, None]
    return uv, w


def _huber_weights(res: np.ndarray, delta: float) -> tuple[np.ndarray, float]:
    """IRLS whitening weights and total robust cost for 2-vector residuals."""
    s = np.sum(res ** 2, axis=1)
    norm = np.sqrt(s)
    w = np.ones(len(s))
    heavy = norm > delta
    w[heavy] = np.sqrt(delta / norm[heavy])
    cost = float(np.sum(np.where(heavy, 2.0 * delta * norm - delta * delta, s)))
    return w, cost


def triangulate_multiview(
    observations: list[tuple[np.ndarray, np.ndarray]],
    cfg: TriangulationConfig | None = None,
) -> TriangulationResult:
    """Triangulate one point from (projection_matrix, pixel) observations.

    Raises :class:`IllConditionedError` for near-parallel rays and
    :class:`BehindCameraError` when the optimum violates cheirality.
    """
    cfg = cfg or TriangulationConfig()
    if len(observations) < 2:
        raise TriangulationError("need at least two observations")
    Ps = np.stack([np.asarray(P, dtype=float) for P, _ in observations])
    uvs = np.stack([np.asarray(uv, dtype=float) for _, uv in observations])

    X = triangulate_dlt(Ps, uvs)
    delta = cfg.huber_factor * cfg.max_reproj_px

    def robust_cost(X):
        uv_hat, w = _project(Ps, X)
        res = uv_hat - uvs
        res[~np.isfinite(res)] = 1e6
        _, cost = _huber_weights(res, delta)
        return cost

    lam = 1e-6
    cost = robust_cost(X)
    for _ in range(cfg.max_iterations):
        uv_hat, w = _project(Ps, X)
        res = uv_hat - uvs
        res[~np.isfinite(res)] = 1e6
        weights, _ = _huber_weights(res, delta)
        # Jacobian of (x/w, y/w) w.r.t. X for every camera
        M = Ps[:, :, :3]
        h = M @ X + Ps[:, :, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            J = (M[:, :2] - uv_hat[:, :, None] * M[:, 2:3]) / h[:, 2, None, None]
        J[~np.isfinite(J)] = 0.0
        Jw = J * weights[:, None, None]
        rw = res * weights[:, None]
        H = np.einsum("kab,kac->bc", Jw, Jw)
        g = np.einsum("kab,ka->b", Jw, rw)
        if float(np.linalg.norm(2.0 * g)) < 1e-12 * (1.0 + cost):
            break
        new_cost = None
        while lam <= 1e12:
            try:
                step = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-15 * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_cost = robust_cost(X + step)
            if new_cost <= cost:
                break
            lam *= 10.0
            new_cost = None
        if new_cost is None:
            break
        rel_decrease = (cost - new_cost) / max(cost, 1e-300)
        X = X + step
        cost = new_cost
        lam = max(lam * 0.3, 1e-12)
        if rel_decrease < cfg.rel_cost_tol:
            break

    uv_hat, w = _project(Ps, X)
    if np.any(w <= 0):
        raise BehindCameraError(f"{int(np.sum(w <= 0))} observation(s) behind the camera")
    errors = np.linalg.norm(uv_hat - uvs, axis=1)

    centers = np.stack([-np.linalg.solve(P[:, :3], P[:, 3]) for P in Ps])
    rays = X - centers
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    min_angle = math.pi
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            ang = math.acos(float(np.clip(rays[i] @ rays[j], -1.0, 1.0)))
            min_angle = min(min_angle, ang)

    return TriangulationResult(
        point=Point3D(X),
        mean_reprojection_error=float(np.mean(errors)),
        min_triangulation_angle=min_angle,
    )


def admit_track(result: TriangulationResult, cfg: TriangulationConfig | None = None) -> bool:
    """Gate a triangulated point on reprojection error and parallax."""
    cfg = cfg or TriangulationConfig()
    return (
        result.mean_reprojection_error < cfg.max_reproj_px
        and result.min_triangulation_angle > cfg.min_angle_rad
    )

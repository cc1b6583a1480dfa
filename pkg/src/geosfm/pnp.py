"""Camera registration from 2D-3D correspondences.

RANSAC over three-point (P3P) minimal samples scored by pixel reprojection,
followed by Levenberg-Marquardt refinement on the inliers. When the view
carries a horizontal prior, refinement also starts from the prior-seeded pose
and includes the prior residual terms, keeping whichever optimum is better.
The pose covariance sigma^2 * (J^T J)^-1 over the 6-parameter tangent space
feeds the next-best-view uncertainty term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rigid_fit, skew, so3_exp
from .model import CameraIntrinsics, PoseSE3


class PnPError(RuntimeError):
    pass


class InsufficientCorrespondencesError(PnPError):
    pass


class PnPRansacFailure(PnPError):
    """Too few reprojection inliers to trust the pose."""


@dataclass
class PnPConfig:
    threshold_px: float = 8.0
    min_inliers: int = 12
    max_iterations: int = 1000
    confidence: float = 0.99
    refine_iterations: int = 50


@dataclass
class PosePriorContext:
    """Prior residual terms for a single pose being refined.

    Edge terms reference already-registered poses, which stay constant here.
    ``rot_edges`` entries are (R_other, R_target, this_is_j, weight) and
    ``relmot_edges`` entries are (t_other, target_diff, this_is_i, weight)
    with target_diff the prior translation difference t_i - t_j.
    """

    trans_target: np.ndarray | None = None  # (2,)
    trans_weight: float = 0.0
    rot_edges: list = field(default_factory=list)
    relmot_edges: list = field(default_factory=list)


@dataclass
class PnPResult:
    pose: PoseSE3
    inlier_count: int
    inlier_indices: np.ndarray
    covariance: np.ndarray  # (6, 6), pose tangent space
    mean_sq_residual: float


def p3p_solve(world: np.ndarray, bearings: np.ndarray) -> list[PoseSE3]:
    """Candidate camera-to-world poses from three points and unit bearings.

    Grunert-style formulation: eliminate the depth ratios into a quartic,
    recover per-point depths, then fit the rigid transform. Degenerate
    configurations return an empty list.
    """
    P = np.asarray(world, dtype=float)
    j = np.asarray(bearings, dtype=float)
    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    if min(a2, b2, c2) < 1e-16:
        return []
    cos_a = float(j[1] @ j[2])
    cos_b = float(j[0] @ j[2])
    cos_g = float(j[0] @ j[1])

    # u = s2/s1, v = s3/s1; two ratio equations eliminate s1
    N = np.array([a2 - b2 - c2, 2.0 * (c2 - a2) * cos_b, a2 + b2 - c2])
    M = np.array([-2.0 * b2 * cos_a, 2.0 * b2 * cos_g])
    D = np.array([-c2, 2.0 * c2 * cos_b, b2 - c2]) / b2
    quartic = np.polyadd(
        np.polysub(np.polymul(N, N), 2.0 * cos_g * np.polymul(N, M)),
        np.polymul(D, np.polymul(M, M)),
    )
    nz = np.flatnonzero(np.abs(quartic) > 1e-14 * max(1.0, np.abs(quartic).max()))
    if nz.size == 0:
        return []
    quartic = quartic[nz[0]:]
    if len(quartic) < 2:
        return []
    roots = np.roots(quartic)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8 * (1.0 + abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        Mv = np.polyval(M, v)
        if abs(Mv) > 1e-10 * b2:
            u_candidates = [np.polyval(N, v) / Mv]
        else:
            # solve the second ratio equation directly: u^2 - 2cos_g u + D(v) = 0
            disc = cos_g * cos_g - np.polyval(D, v)
            if disc < 0:
                continue
            u_candidates = [cos_g + math.sqrt(disc), cos_g - math.sqrt(disc)]
        for u in u_candidates:
            if u <= 0:
                continue
            denom = 1.0 + v * v - 2.0 * v * cos_b
            if denom <= 1e-16:
                continue
            s1 = math.sqrt(b2 / denom)
            depths = np.array([s1, u * s1, v * s1])
            cam_pts = depths[:, None] * j
            try:
                R_wc, t_wc = rigid_fit(P, cam_pts)
            except np.linalg.LinAlgError:
                continue
            poses.append(PoseSE3(R_wc.T, -R_wc.T @ t_wc))
    return poses


def _project_all(pose: PoseSE3, intr: CameraIntrinsics, world: np.ndarray):
    q = (world - pose.translation) @ pose.rotation
    w = q[:, 2]
    safe = np.where(w > 1e-12, w, 1.0)
    xn, yn = q[:, 0] / safe, q[:, 1] / safe
    r2 = xn * xn + yn * yn
    dfac = 1.0 + intr.radial_distortion * r2
    cx, cy = intr.principal_point
    uv = np.column_stack([intr.focal * dfac * xn + cx, intr.focal * dfac * yn + cy])
    return uv, w


def _reproj_residuals_jac_batch(pose: PoseSE3, intr: CameraIntrinsics, world, pixels):
    """Vectorized pose-only reprojection residuals and (n, 2, 6) Jacobians."""
    R = pose.rotation
    q = (world - pose.translation) @ R
    w = q[:, 2]
    active = w > 1e-12
    safe = np.where(active, w, 1.0)
    xn, yn = q[:, 0] / safe, q[:, 1] / safe
    r2 = xn * xn + yn * yn
    kd = intr.radial_distortion
    f = intr.focal
    dfac = 1.0 + kd * r2
    cx, cy = intr.principal_point
    res = np.column_stack(
        [f * dfac * xn + cx - pixels[:, 0], f * dfac * yn + cy - pixels[:, 1]]
    )
    res[~active] = 0.0
    n = len(world)
    A = np.empty((n, 2, 2))
    A[:, 0, 0] = f * (dfac + 2.0 * kd * xn * xn)
    A[:, 0, 1] = f * 2.0 * kd * xn * yn
    A[:, 1, 0] = A[:, 0, 1]
    A[:, 1, 1] = f * (dfac + 2.0 * kd * yn * yn)
    B = np.zeros((n, 2, 3))
    B[:, 0, 0] = 1.0 / safe
    B[:, 1, 1] = 1.0 / safe
    B[:, 0, 2] = -xn / safe
    B[:, 1, 2] = -yn / safe
    G = np.einsum("kab,kbc->kac", A, B)
    Sq = np.zeros((n, 3, 3))
    Sq[:, 0, 1] = -q[:, 2]
    Sq[:, 0, 2] = q[:, 1]
    Sq[:, 1, 0] = q[:, 2]
    Sq[:, 1, 2] = -q[:, 0]
    Sq[:, 2, 0] = -q[:, 1]
    Sq[:, 2, 1] = q[:, 0]
    J = np.empty((n, 2, 6))
    J[:, :, 0:3] = np.einsum("kab,kbc->kac", G, Sq)
    J[:, :, 3:6] = -np.einsum("kac,bc->kab", G, R)
    J[~active] = 0.0
    return res, J


def _pose_residuals_jac(
    pose: PoseSE3,
    intr: CameraIntrinsics,
    world: np.ndarray,
    pixels: np.ndarray,
    prior: PosePriorContext | None,
):
    """Stacked residuals and (n, 6) Jacobian of the refinement problem."""
    res_parts = []
    jac_parts = []
    res, J = _reproj_residuals_jac_batch(pose, intr, world, pixels)
    res_parts.append(res.ravel())
    jac_parts.append(J.reshape(-1, 6))

    if prior is not None:
        if prior.trans_target is not None and prior.trans_weight > 0:
            r = prior.trans_weight * (pose.translation[:2] - prior.trans_target)
            Jt = np.zeros((2, 6))
            Jt[0, 3] = prior.trans_weight
            Jt[1, 4] = prior.trans_weight
            res_parts.append(r)
            jac_parts.append(Jt)
        for R_other, R_target, this_is_j, weight in prior.rot_edges:
            if this_is_j:
                R_rel = pose.rotation @ R_other.T
                r = weight * (R_rel - R_target).ravel()
                Jr = np.zeros((9, 6))
                for k in range(3):
                    Jr[:, k] = weight * (pose.rotation @ skew(np.eye(3)[k]) @ R_other.T).ravel()
            else:
                R_rel = R_other @ pose.rotation.T
                r = weight * (R_rel - R_target).ravel()
                Jr = np.zeros((9, 6))
                for k in range(3):
                    Jr[:, k] = -weight * (R_other @ skew(np.eye(3)[k]) @ pose.rotation.T).ravel()
            res_parts.append(r)
            jac_parts.append(Jr)
        for t_other, target_diff, this_is_i, weight in prior.relmot_edges:
            # residual on (t_i - t_j) - target; derivative in this pose is +/-I
            sign = 1.0 if this_is_i else -1.0
            value = sign * (pose.translation - t_other)
            r = weight * (value - target_diff)
            Jm = np.zeros((3, 6))
            Jm[:, 3:6] = sign * weight * np.eye(3)
            res_parts.append(r)
            jac_parts.append(Jm)

    return np.concatenate(res_parts), np.vstack(jac_parts)


def refine_pose(
    pose: PoseSE3,
    intr: CameraIntrinsics,
    world: np.ndarray,
    pixels: np.ndarray,
    prior: PosePriorContext | None = None,
    max_iterations: int = 50,
) -> tuple[PoseSE3, float]:
    """Damped Gauss-Newton on the 6-parameter pose; returns (pose, cost)."""
    R = pose.rotation.copy()
    t = pose.translation.copy()

    def cost_of(R, t):
        r, _ = _pose_residuals_jac(PoseSE3(R, t), intr, world, pixels, prior)
        return float(r @ r)

    cost = cost_of(R, t)
    lam = 1e-6
    for _ in range(max_iterations):
        r, J = _pose_residuals_jac(PoseSE3(R, t), intr, world, pixels, prior)
        H = J.T @ J
        g = J.T @ r
        if np.linalg.norm(g) < 1e-12 * (1.0 + cost):
            break
        stepped = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = R @ so3_exp(delta[:3])
            t_new = t + delta[3:]
            new_cost = cost_of(R_new, t_new)
            if new_cost <= cost:
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        R, t, cost = R_new, t_new, new_cost
        lam = max(lam * 0.3, 1e-12)
        if rel < 1e-12:
            break
    return PoseSE3(R, t), cost


def register_view_pnp(
    world: np.ndarray,
    pixels: np.ndarray,
    intr: CameraIntrinsics,
    cfg: PnPConfig,
    rng: np.random.Generator,
    prior_pose: PoseSE3 | None = None,
    prior: PosePriorContext | None = None,
) -> PnPResult:
    """Full registration: P3P RANSAC, LM refinement, tangent-space covariance.

    ``prior_pose`` (the lifted 3-DoF prior) seeds an extra refinement start;
    the better optimum wins, so a bad prior can never degrade the result.
    """
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(world)
    if n < 4:
        raise InsufficientCorrespondencesError(f"need at least 4 correspondences, got {n}")

    K = intr.matrix()
    bearings = np.column_stack(
        [
            (pixels[:, 0] - K[0, 2]) / K[0, 0],
            (pixels[:, 1] - K[1, 2]) / K[1, 1],
            np.ones(n),
        ]
    )
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    best_key = None
    best_pose = None
    needed = cfg.max_iterations
    for it in range(cfg.max_iterations):
        if it >= needed:
            break
        sample = rng.choice(n, size=3, replace=False)
        for pose in p3p_solve(world[sample], bearings[sample]):
            uv, w = _project_all(pose, intr, world)
            err = np.linalg.norm(uv - pixels, axis=1)
            err[w <= 0] = np.inf
            mask = err < cfg.threshold_px
            n_inl = int(mask.sum())
            key = (-n_inl, float(np.sum(np.minimum(err, cfg.threshold_px) ** 2)), it)
            if best_key is None or key < best_key:
                best_key, best_pose = key, pose
                ratio = n_inl / n
                if ratio > 0:
                    fail = 1.0 - ratio**3
                    needed = cfg.max_iterations if fail >= 1.0 else min(
                        cfg.max_iterations,
                        int(
                            math.ceil(
                                math.log(max(1.0 - cfg.confidence, 1e-15))
                                / math.log(fail)
                            )
                        )
                        if fail > 0
                        else 0,
                    )
    if best_pose is None:
        raise PnPRansacFailure("all P3P samples degenerate")

    uv, w = _project_all(best_pose, intr, world)
    err = np.linalg.norm(uv - pixels, axis=1)
    err[w <= 0] = np.inf
    inlier_mask = err < cfg.threshold_px
    if int(inlier_mask.sum()) < max(cfg.min_inliers, 4):
        raise PnPRansacFailure(
            f"{int(inlier_mask.sum())} inliers < required {max(cfg.min_inliers, 4)}"
        )

    w_in = world[inlier_mask]
    p_in = pixels[inlier_mask]
    starts = [best_pose]
    if prior_pose is not None:
        starts.append(prior_pose)
    # rank refined candidates by reprojection support first: a start that
    # drives points behind the camera zeroes its residuals and must not win
    # a bare cost comparison
    ranked = []
    for order, start in enumerate(starts):
        refined_pose, cost = refine_pose(
            start.copy(), intr, w_in, p_in, prior, cfg.refine_iterations
        )
        uv_r, w_r = _project_all(refined_pose, intr, world)
        err_r = np.linalg.norm(uv_r - pixels, axis=1)
        err_r[w_r <= 0] = np.inf
        ranked.append((-int(np.sum(err_r < cfg.threshold_px)), cost, order, refined_pose))
    ranked.sort(key=lambda item: item[:3])
    refined = ranked[0][3]

    uv, w = _project_all(refined, intr, world)
    err = np.linalg.norm(uv - pixels, axis=1)
    err[w <= 0] = np.inf
    final_mask = err < cfg.threshold_px
    if int(final_mask.sum()) < max(cfg.min_inliers, 4):
        raise PnPRansacFailure("refinement lost the inlier support")

    r_in = err[final_mask]
    sigma2 = float(np.sum(r_in**2) / max(2 * len(r_in), 1))
    _, J = _pose_residuals_jac(
        refined, intr, world[final_mask], pixels[final_mask], prior
    )
    H = J.T @ J
    try:
        cov = sigma2 * np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = sigma2 * np.linalg.pinv(H)
    cov = 0.5 * (cov + cov.T)
    return PnPResult(
        pose=refined,
        inlier_count=int(final_mask.sum()),
        inlier_indices=np.flatnonzero(final_mask),
        covariance=cov,
        mean_sq_residual=float(np.mean(r_in**2)),
    )

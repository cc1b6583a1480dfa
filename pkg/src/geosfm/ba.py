"""Geometry-aware bundle adjustment.

Joint Levenberg-Marquardt refinement of camera poses, shared intrinsics, and
3D structure under two families of residuals:

* pixel reprojection residuals (Huber-robustified), and
* horizontal-prior residuals: per-view position terms against the
  cross-view (x, y) prior, per-edge Frobenius differences between estimated
  and prior relative rotations, and per-edge relative-motion terms on
  translations.

Prior residual weights follow the confidence-aware law w = 1 / (1 + a*N)
in the number of feature matches, so priors fade where correspondences are
strong. The normal equations are solved with a Schur complement over the
point blocks; poses use 3-parameter rotation increments composed on the
right (``R <- R @ exp(skew(w))``) so updates stay singularity-free.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import project_to_rotation, skew, so3_exp, yaw_rotation
from .model import CameraIntrinsics, PoseSE3

logger = logging.getLogger(__name__)


class BaError(RuntimeError):
    pass


class GaugeError(BaError):
    """Normal equations are rank-deficient: no fixed blocks and no priors."""


class BehindCameraError(BaError):
    pass


@dataclass
class PriorWeightConfig:
    """Scaling factors of the prior terms and the match-count weight law."""

    lambda_t: float = 1.0
    lambda_r: float = 0.1
    lambda_m: float = 0.1
    alpha: float = 0.05
    beta: float = 0.05
    min_edge_matches: int = 15

    def __post_init__(self) -> None:
        for name in ("lambda_t", "lambda_r", "lambda_m", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def confidence_weights(
    n_matches_view: int, n_matches_edge: int, cfg: PriorWeightConfig
) -> tuple[float, float]:
    """Match-count weights (w_t, w_R); both 1 at zero matches and strictly
    decreasing in the counts."""
    if n_matches_view < 0 or n_matches_edge < 0:
        raise ValueError("match counts must be >= 0")
    w_t = 1.0 / (1.0 + cfg.alpha * n_matches_view)
    w_r = 1.0 / (1.0 + cfg.beta * n_matches_edge)
    return w_t, w_r


@dataclass
class TranslationPrior:
    pose: int
    target_xy: np.ndarray  # (2,)
    weight: float  # multiplies the residual; squared cost gets weight**2


@dataclass
class RotationPrior:
    pose_i: int
    pose_j: int
    target: np.ndarray  # (3,3) prior relative rotation R_j^p @ R_i^p.T
    weight: float


@dataclass
class RelativeMotionPrior:
    pose_i: int
    pose_j: int
    target: np.ndarray  # (3,) prior translation difference t_i^p - t_j^p
    weight: float


@dataclass
class BaProblem:
    """Blocks and residual terms of one bundle-adjustment solve.

    The structure (observation lists, prior terms, fixed masks) is immutable
    during a solve; block values are updated in place by the solver.
    """

    rotations: np.ndarray  # (n, 3, 3) camera-to-world
    translations: np.ndarray  # (n, 3) camera centers
    intrinsics: np.ndarray  # (m, 3): focal, cx, cy
    distortions: np.ndarray  # (m,) fixed radial coefficient
    pose_groups: np.ndarray  # (n,) intrinsic block of each pose
    points: np.ndarray  # (p, 3)
    obs_cam: np.ndarray  # (K,)
    obs_pt: np.ndarray  # (K,)
    obs_uv: np.ndarray  # (K, 2)
    fixed_pose_params: np.ndarray | None = None  # (n, 6) bool
    fixed_intr_params: np.ndarray | None = None  # (m, 3) bool
    focal_bounds: np.ndarray | None = None  # (m, 2) clamp range for focals
    trans_priors: list[TranslationPrior] = field(default_factory=list)
    rot_priors: list[RotationPrior] = field(default_factory=list)
    relmot_priors: list[RelativeMotionPrior] = field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.rotations)
        m = len(self.intrinsics)
        if self.fixed_pose_params is None:
            self.fixed_pose_params = np.zeros((n, 6), dtype=bool)
        if self.fixed_intr_params is None:
            self.fixed_intr_params = np.zeros((m, 3), dtype=bool)
        self.obs_cam = np.asarray(self.obs_cam, dtype=int)
        self.obs_pt = np.asarray(self.obs_pt, dtype=int)
        self.obs_uv = np.asarray(self.obs_uv, dtype=float).reshape(-1, 2)

    @property
    def n_poses(self) -> int:
        return len(self.rotations)

    @property
    def n_camera_params(self) -> int:
        return 6 * len(self.rotations) + 3 * len(self.intrinsics)

    def has_gauge(self) -> bool:
        return bool(np.any(self.fixed_pose_params)) or bool(self.trans_priors)


@dataclass
class BaCostBreakdown:
    reprojection: float = 0.0
    translation_prior: float = 0.0
    rotation_prior: float = 0.0
    relative_motion: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.reprojection
            + self.translation_prior
            + self.rotation_prior
            + self.relative_motion
        )


@dataclass
class BaResult:
    initial_cost: BaCostBreakdown
    final_cost: BaCostBreakdown
    iterations: int
    converged: bool
    non_convergent_warning: bool
    n_deactivated: int
    gradient_norm: float


@dataclass
class BaOptions:
    max_iterations: int = 100
    rel_cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    abs_cost_tol: float = 1e-14  # noise-free problems bottom out here
    huber_px: float = 16.0
    init_damping: float = 1e-4


# ---------------------------------------------------------------------------
# single-term residuals and Jacobians (also used by PnP refinement and tests)
# ---------------------------------------------------------------------------


def project_point(
    intr: CameraIntrinsics | np.ndarray,
    pose: PoseSE3,
    X: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Pixel projection and depth of a world point; distortion applied."""
    if isinstance(intr, CameraIntrinsics):
        f, (cx, cy), k = intr.focal, intr.principal_point, intr.radial_distortion
    else:
        f, cx, cy = intr
        k = 0.0
    q = pose.rotation.T @ (np.asarray(X, dtype=float) - pose.translation)
    w = q[2]
    if w == 0:
        return np.array([np.inf, np.inf]), 0.0
    xn, yn = q[0] / w, q[1] / w
    dfac = 1.0 + k * (xn * xn + yn * yn)
    return np.array([f * dfac * xn + cx, f * dfac * yn + cy]), float(w)


def reprojection_residual(
    intr: CameraIntrinsics | np.ndarray,
    pose: PoseSE3,
    X: np.ndarray,
    observed: np.ndarray,
) -> np.ndarray:
    """pi(K, T, X) - observed, raising when the point is behind the camera."""
    uv, w = project_point(intr, pose, X)
    if w <= 0:
        raise BehindCameraError("point projects behind the camera")
    return uv - np.asarray(observed, dtype=float)


def reprojection_jacobians(
    intr: CameraIntrinsics, pose: PoseSE3, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic Jacobians of the reprojection residual.

    Returns (J_pose (2,6), J_intr (2,3), J_point (2,3)); pose columns are the
    rotation tangent (right-composed) followed by the translation.
    """
    f = intr.focal
    k = intr.radial_distortion
    R = pose.rotation
    q = R.T @ (np.asarray(X, dtype=float) - pose.translation)
    w = q[2]
    xn, yn = q[0] / w, q[1] / w
    r2 = xn * xn + yn * yn
    dfac = 1.0 + k * r2
    A = f * np.array(
        [[dfac + 2.0 * k * xn * xn, 2.0 * k * xn * yn],
         [2.0 * k * xn * yn, dfac + 2.0 * k * yn * yn]]
    )
    B = np.array([[1.0 / w, 0.0, -xn / w], [0.0, 1.0 / w, -yn / w]])
    G = A @ B
    J_omega = G @ skew(q)
    J_t = -G @ R.T
    J_point = G @ R.T
    J_intr = np.column_stack([dfac * np.array([xn, yn]), np.eye(2)])
    return np.hstack([J_omega, J_t]), J_intr, J_point


# ---------------------------------------------------------------------------
# prior term construction
# ---------------------------------------------------------------------------


def build_prior_terms(
    pose_index: dict[int, int],
    priors: dict,
    z_seeds: dict[int, float],
    view_match_counts: dict[int, int],
    pair_match_counts: dict[tuple[int, int], int],
    cfg: PriorWeightConfig,
) -> tuple[list[TranslationPrior], list[RotationPrior], list[RelativeMotionPrior]]:
    """Assemble weighted prior residual terms for the views in the problem.

    ``pose_index`` maps view ids to pose block indices; ``priors`` maps view
    ids to objects with x, y, yaw, confidence. The edge set consists of view
    pairs where both views hold priors and share at least
    ``cfg.min_edge_matches`` matches. A zero scaling factor produces no terms
    of that family at all.
    """
    trans: list[TranslationPrior] = []
    rots: list[RotationPrior] = []
    relmot: list[RelativeMotionPrior] = []
    prior_views = sorted(v for v in pose_index if v in priors)

    if cfg.lambda_t > 0:
        for vid in prior_views:
            p = priors[vid]
            w_t, _ = confidence_weights(view_match_counts.get(vid, 0), 0, cfg)
            weight = np.sqrt(cfg.lambda_t * w_t * p.confidence)
            if weight > 0:
                trans.append(
                    TranslationPrior(pose_index[vid], np.array([p.x, p.y]), float(weight))
                )

    if cfg.lambda_r > 0 or cfg.lambda_m > 0:
        for a in range(len(prior_views)):
            for b in range(a + 1, len(prior_views)):
                vi, vj = prior_views[a], prior_views[b]
                n_edge = pair_match_counts.get((vi, vj), 0)
                if n_edge < cfg.min_edge_matches:
                    continue
                pi, pj = priors[vi], priors[vj]
                conf = np.sqrt(pi.confidence * pj.confidence)
                if cfg.lambda_r > 0:
                    _, w_r = confidence_weights(0, n_edge, cfg)
                    weight = np.sqrt(cfg.lambda_r * w_r * conf)
                    target = yaw_rotation(pj.yaw) @ yaw_rotation(pi.yaw).T
                    rots.append(
                        RotationPrior(pose_index[vi], pose_index[vj], target, float(weight))
                    )
                if cfg.lambda_m > 0:
                    ti = np.array([pi.x, pi.y, z_seeds.get(vi, 0.0)])
                    tj = np.array([pj.x, pj.y, z_seeds.get(vj, 0.0)])
                    weight = np.sqrt(cfg.lambda_m * conf)
                    relmot.append(
                        RelativeMotionPrior(
                            pose_index[vi], pose_index[vj], ti - tj, float(weight)
                        )
                    )
    return trans, rots, relmot


def _prior_residuals(problem: BaProblem, rotations, translations):
    """Stacked residual vectors of the three prior families."""
    r_t, r_r, r_m = [], [], []
    for term in problem.trans_priors:
        r_t.append(term.weight * (translations[term.pose][:2] - term.target_xy))
    for term in problem.rot_priors:
        R_ij = rotations[term.pose_j] @ rotations[term.pose_i].T
        r_r.append(term.weight * (R_ij - term.target).ravel())
    for term in problem.relmot_priors:
        diff = translations[term.pose_i] - translations[term.pose_j]
        r_m.append(term.weight * (diff - term.target))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return cat(r_t), cat(r_r), cat(r_m)


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------


def _huber(res2: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """(whitening weights, per-term robust cost) for squared residual norms."""
    norm = np.sqrt(res2)
    w = np.ones_like(norm)
    heavy = norm > delta
    w[heavy] = np.sqrt(delta / norm[heavy])
    cost = np.where(heavy, 2.0 * delta * norm - delta * delta, res2)
    return w, cost


class _Solver:
    def __init__(self, problem: BaProblem, options: BaOptions):
        self.p = problem
        self.opt = options
        n, m = problem.n_poses, len(problem.intrinsics)
        self.nc = 6 * n + 3 * m
        K = len(problem.obs_cam)
        # camera-side parameter indices touched by each observation
        idx = np.empty((K, 9), dtype=int)
        idx[:, :6] = 6 * problem.obs_cam[:, None] + np.arange(6)
        grp = problem.pose_groups[problem.obs_cam]
        idx[:, 6:] = 6 * n + 3 * grp[:, None] + np.arange(3)
        self.obs_idx = idx
        free = np.ones(self.nc, dtype=bool)
        free[: 6 * n] = ~problem.fixed_pose_params.reshape(-1)
        free[6 * n:] = ~problem.fixed_intr_params.reshape(-1)
        self.free = free
        # observation pairs sharing a point, for the Schur fill-in
        order = np.argsort(problem.obs_pt, kind="stable")
        pair_a, pair_b = [], []
        start = 0
        sorted_pt = problem.obs_pt[order]
        while start < K:
            end = start
            while end < K and sorted_pt[end] == sorted_pt[start]:
                end += 1
            group = order[start:end]
            ga, gb = np.meshgrid(group, group, indexing="ij")
            pair_a.append(ga.ravel())
            pair_b.append(gb.ravel())
            start = end
        self.pair_a = np.concatenate(pair_a) if pair_a else np.zeros(0, dtype=int)
        self.pair_b = np.concatenate(pair_b) if pair_b else np.zeros(0, dtype=int)
        flat = (
            self.obs_idx[self.pair_a][:, :, None] * self.nc
            + self.obs_idx[self.pair_b][:, None, :]
        )
        self.pair_flat_idx = flat.ravel()
        self.n_deactivated = 0

    # -- residual evaluation ------------------------------------------------

    def reprojection_terms(self, rotations, translations, intrinsics, points, jac: bool):
        p = self.p
        K = len(p.obs_cam)
        if K == 0:
            zero = np.zeros((0,))
            return (zero.reshape(0, 2), np.zeros(0, dtype=bool), 0.0) + (
                (np.zeros((0, 2, 9)), np.zeros((0, 2, 3))) if jac else ()
            )
        R = rotations[p.obs_cam]
        t = translations[p.obs_cam]
        grp = p.pose_groups[p.obs_cam]
        f = intrinsics[grp, 0]
        cx = intrinsics[grp, 1]
        cy = intrinsics[grp, 2]
        kd = p.distortions[grp]
        X = points[p.obs_pt]
        q = np.einsum("kji,kj->ki", R, X - t)
        w = q[:, 2]
        active = w > 1e-9
        w_safe = np.where(active, w, 1.0)
        xn = q[:, 0] / w_safe
        yn = q[:, 1] / w_safe
        r2 = xn * xn + yn * yn
        dfac = 1.0 + kd * r2
        res = np.column_stack(
            [f * dfac * xn + cx - p.obs_uv[:, 0], f * dfac * yn + cy - p.obs_uv[:, 1]]
        )
        res[~active] = 0.0
        hw, hcost = _huber(np.sum(res * res, axis=1), self.opt.huber_px)
        hw[~active] = 0.0
        hcost = np.where(active, hcost, 0.0)
        cost = float(np.sum(hcost))
        res_w = res * hw[:, None]
        if not jac:
            return res_w, active, cost
        A = np.empty((K, 2, 2))
        A[:, 0, 0] = f * (dfac + 2.0 * kd * xn * xn)
        A[:, 0, 1] = f * 2.0 * kd * xn * yn
        A[:, 1, 0] = A[:, 0, 1]
        A[:, 1, 1] = f * (dfac + 2.0 * kd * yn * yn)
        B = np.zeros((K, 2, 3))
        B[:, 0, 0] = 1.0 / w_safe
        B[:, 1, 1] = 1.0 / w_safe
        B[:, 0, 2] = -xn / w_safe
        B[:, 1, 2] = -yn / w_safe
        G = np.einsum("kab,kbc->kac", A, B)
        Sq = np.zeros((K, 3, 3))
        Sq[:, 0, 1] = -q[:, 2]
        Sq[:, 0, 2] = q[:, 1]
        Sq[:, 1, 0] = q[:, 2]
        Sq[:, 1, 2] = -q[:, 0]
        Sq[:, 2, 0] = -q[:, 1]
        Sq[:, 2, 1] = q[:, 0]
        GR = np.einsum("kac,kbc->kab", G, R)  # G @ R^T
        J_cam = np.empty((K, 2, 9))
        J_cam[:, :, 0:3] = np.einsum("kab,kbc->kac", G, Sq)
        J_cam[:, :, 3:6] = -GR
        J_cam[:, :, 6] = dfac[:, None] * np.column_stack([xn, yn])
        J_cam[:, :, 7] = [1.0, 0.0]
        J_cam[:, :, 8] = [0.0, 1.0]
        J_pt = GR.copy()
        scale = hw * active
        J_cam *= scale[:, None, None]
        J_pt *= scale[:, None, None]
        J_cam *= self.free[self.obs_idx][:, None, :]
        return res_w, active, cost, J_cam, J_pt

    def cost_at(self, rotations, translations, intrinsics, points) -> BaCostBreakdown:
        _, _, reproj = self.reprojection_terms(
            rotations, translations, intrinsics, points, jac=False
        )
        r_t, r_r, r_m = _prior_residuals(self.p, rotations, translations)
        return BaCostBreakdown(
            reprojection=reproj,
            translation_prior=float(r_t @ r_t),
            rotation_prior=float(r_r @ r_r),
            relative_motion=float(r_m @ r_m),
        )

    # -- normal equations ---------------------------------------------------

    def _accumulate_priors(self, rotations, translations, H_cc, b_c):
        free = self.free
        for term in self.p.trans_priors:
            r = term.weight * (translations[term.pose][:2] - term.target_xy)
            for axis in range(2):
                col = 6 * term.pose + 3 + axis
                if not free[col]:
                    continue
                H_cc[col, col] += term.weight * term.weight
                b_c[col] -= term.weight * r[axis]
        for term in self.p.rot_priors:
            Ri, Rj = rotations[term.pose_i], rotations[term.pose_j]
            r = term.weight * (Rj @ Ri.T - term.target).ravel()
            J = np.zeros((9, 6))
            for k in range(3):
                D = Rj @ skew(np.eye(3)[k]) @ Ri.T
                J[:, k] = -D.ravel()  # omega_i column
                J[:, 3 + k] = D.ravel()  # omega_j column
            J *= term.weight
            cols = np.concatenate(
                [6 * term.pose_i + np.arange(3), 6 * term.pose_j + np.arange(3)]
            )
            J *= free[cols][None, :]
            H_cc[np.ix_(cols, cols)] += J.T @ J
            b_c[cols] -= J.T @ r
        for term in self.p.relmot_priors:
            r = term.weight * (
                translations[term.pose_i] - translations[term.pose_j] - term.target
            )
            cols = np.concatenate(
                [6 * term.pose_i + 3 + np.arange(3), 6 * term.pose_j + 3 + np.arange(3)]
            )
            J = term.weight * np.hstack([np.eye(3), -np.eye(3)])
            J *= free[cols][None, :]
            H_cc[np.ix_(cols, cols)] += J.T @ J
            b_c[cols] -= J.T @ r

    def assemble(self, rotations, translations, intrinsics, points) -> float:
        """Build the undamped normal equations at the current state.

        Returns the gradient norm over free parameters; the damped solve is
        a separate (cheaper) step so damping retries skip re-linearization.
        """
        p = self.p
        out = self.reprojection_terms(rotations, translations, intrinsics, points, jac=True)
        res_w, active, _, J_cam, J_pt = out
        self.n_deactivated = int(np.sum(~active))
        nc = self.nc
        H_cc = np.zeros((nc, nc))
        b_c = np.zeros(nc)
        n_pts = len(points)
        Hpp = np.zeros((n_pts, 3, 3))
        b_p = np.zeros((n_pts, 3))
        K = len(p.obs_cam)
        if K:
            HCC_contrib = np.einsum("kap,kaq->kpq", J_cam, J_cam)
            flat = (self.obs_idx[:, :, None] * nc + self.obs_idx[:, None, :]).ravel()
            H_cc += np.bincount(
                flat, weights=HCC_contrib.ravel(), minlength=nc * nc
            ).reshape(nc, nc)
            b_c += np.bincount(
                self.obs_idx.ravel(),
                weights=(-np.einsum("kap,ka->kp", J_cam, res_w)).ravel(),
                minlength=nc,
            )
            np.add.at(Hpp, p.obs_pt, np.einsum("kap,kaq->kpq", J_pt, J_pt))
            np.add.at(b_p, p.obs_pt, -np.einsum("kap,ka->kp", J_pt, res_w))
            self._W = np.einsum("kap,kaq->kpq", J_cam, J_pt)  # (K, 9, 3)
        else:
            self._W = np.zeros((0, 9, 3))
        self._accumulate_priors(rotations, translations, H_cc, b_c)
        self._H_cc, self._b_c = H_cc, b_c * self.free
        self._Hpp, self._b_p = Hpp, b_p
        return float(np.sqrt(np.sum(b_c[self.free] ** 2) + np.sum(b_p**2)))

    def solve(self, damping: float) -> tuple[np.ndarray, np.ndarray]:
        """Damped Schur-complement solve of the assembled normal equations."""
        p = self.p
        nc = self.nc
        # parameters no residual touches get no update (zero diagonal, zero
        # gradient); treat them like fixed so the solve stays nonsingular
        fixed = ~self.free | (np.abs(np.diag(self._H_cc)) < 1e-300)
        H_cc_d = self._H_cc + np.diag(damping * np.diag(self._H_cc))
        H_cc_d[fixed, :] = 0.0
        H_cc_d[:, fixed] = 0.0
        H_cc_d[fixed, fixed] = 1.0
        b_c = self._b_c * ~fixed
        n_pts = len(self._Hpp)
        K = len(p.obs_cam)

        if K and n_pts:
            Hpp_d = self._Hpp.copy()
            dd = np.arange(3)
            Hpp_d[:, dd, dd] *= 1.0 + damping
            empty = np.abs(Hpp_d).sum(axis=(1, 2)) < 1e-300
            Hpp_d[empty] = np.eye(3)
            Hpp_inv = np.linalg.inv(Hpp_d)
            Hpp_inv[empty] = 0.0
            W = self._W
            Z = np.einsum("kpq,kqr->kpr", W, Hpp_inv[p.obs_pt])
            V = np.einsum("npq,nrq->npr", Z[self.pair_a], W[self.pair_b])
            S = H_cc_d - np.bincount(
                self.pair_flat_idx, weights=V.ravel(), minlength=nc * nc
            ).reshape(nc, nc)
            rhs = b_c - np.bincount(
                self.obs_idx.ravel(),
                weights=np.einsum("kpq,kq->kp", Z, self._b_p[p.obs_pt]).ravel(),
                minlength=nc,
            )
            S[fixed, :] = 0.0
            S[:, fixed] = 0.0
            S[fixed, fixed] = 1.0
            rhs = rhs * self.free
            try:
                delta_c = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError as exc:
                raise GaugeError(f"normal equations rank-deficient: {exc}") from exc
            back = self._b_p.copy()
            np.add.at(back, p.obs_pt, -np.einsum("kpq,kp->kq", W, delta_c[self.obs_idx]))
            delta_p = np.einsum("npq,nq->np", Hpp_inv, back)
        else:
            try:
                delta_c = np.linalg.solve(H_cc_d, b_c)
            except np.linalg.LinAlgError as exc:
                raise GaugeError(f"normal equations rank-deficient: {exc}") from exc
            delta_p = np.zeros((n_pts, 3))
        return delta_c, delta_p


def _apply_step(problem, rotations, translations, intrinsics, points, delta_c, delta_p):
    n = problem.n_poses
    new_R = rotations.copy()
    new_t = translations.copy()
    for i in range(n):
        omega = delta_c[6 * i: 6 * i + 3]
        if np.any(omega):
            new_R[i] = rotations[i] @ so3_exp(omega)
        new_t[i] = translations[i] + delta_c[6 * i + 3: 6 * i + 6]
    new_K = intrinsics + delta_c[6 * n:].reshape(-1, 3)
    if problem.focal_bounds is not None:
        new_K[:, 0] = np.clip(
            new_K[:, 0], problem.focal_bounds[:, 0], problem.focal_bounds[:, 1]
        )
    return new_R, new_t, new_K, points + delta_p


def run_bundle_adjustment(problem: BaProblem, options: BaOptions | None = None) -> BaResult:
    """LM with sparse Schur-complement normal equations.

    Mutates the problem blocks in place. Total cost is nonincreasing across
    accepted steps; terminates on relative cost decrease, gradient norm, or
    the iteration cap (returned as a non-convergence warning when the cost
    was still moving).
    """
    options = options or BaOptions()
    if not problem.has_gauge():
        raise GaugeError(
            "no fixed blocks and no priors: fix a pose (and a scale) or add priors"
        )
    solver = _Solver(problem, options)
    R = problem.rotations.astype(float).copy()
    t = problem.translations.astype(float).copy()
    Kmat = problem.intrinsics.astype(float).copy()
    X = problem.points.astype(float).copy()

    initial = solver.cost_at(R, t, Kmat, X)
    cost = initial.total
    damping = options.init_damping
    iterations = 0
    converged = cost <= options.abs_cost_tol
    last_rel_decrease = np.inf
    grad_norm = np.inf

    while not converged and iterations < options.max_iterations:
        iterations += 1
        grad_norm = solver.assemble(R, t, Kmat, X)
        if grad_norm < options.grad_tol:
            converged = True
            break
        accepted = False
        while damping < 1e14:
            delta_c, delta_p = solver.solve(damping)
            trial = _apply_step(problem, R, t, Kmat, X, delta_c, delta_p)
            trial_cost = solver.cost_at(*trial).total
            if trial_cost <= cost:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            converged = True  # no descent direction left at any damping
            break
        R, t, Kmat, X = trial
        last_rel_decrease = (cost - trial_cost) / max(cost, 1e-300)
        cost = trial_cost
        damping = max(damping * 0.3, 1e-12)
        if (
            last_rel_decrease < options.rel_cost_tol
            or cost <= options.abs_cost_tol
        ):
            converged = True
            break

    # re-orthonormalize against accumulated floating-point drift
    for i in range(problem.n_poses):
        R[i] = project_to_rotation(R[i])
    problem.rotations[...] = R
    problem.translations[...] = t
    problem.intrinsics[...] = Kmat
    problem.points[...] = X

    final = solver.cost_at(R, t, Kmat, X)
    warning = not converged and last_rel_decrease > 1e-6
    if warning:
        logger.warning(
            "bundle adjustment hit the iteration cap with cost still decreasing "
            "(last relative decrease %.3g)",
            last_rel_decrease,
        )
    return BaResult(
        initial_cost=initial,
        final_cost=final,
        iterations=iterations,
        converged=converged,
        non_convergent_warning=warning,
        n_deactivated=solver.n_deactivated,
        gradient_norm=grad_norm,
    )


# ---------------------------------------------------------------------------
# problem dump (debugging aid)
# ---------------------------------------------------------------------------


def dump_problem(problem: BaProblem, path) -> None:
    """Write a structured-text dump sufficient to reproduce the solve."""

    def fmt(a):
        return " ".join(f"{x:.17g}" for x in np.asarray(a, dtype=float).ravel())

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("GEOSFM-BA-DUMP 1\n")
        for i in range(problem.n_poses):
            fh.write(
                f"POSE {i} {problem.pose_groups[i]} {fmt(problem.rotations[i])} "
                f"{fmt(problem.translations[i])} "
                f"{fmt(problem.fixed_pose_params[i].astype(float))}\n"
            )
        for j in range(len(problem.intrinsics)):
            fh.write(
                f"INTR {j} {fmt(problem.intrinsics[j])} {problem.distortions[j]:.17g} "
                f"{fmt(problem.fixed_intr_params[j].astype(float))}\n"
            )
        for j in range(len(problem.points)):
            fh.write(f"POINT {j} {fmt(problem.points[j])}\n")
        for k in range(len(problem.obs_cam)):
            fh.write(
                f"OBS {problem.obs_cam[k]} {problem.obs_pt[k]} {fmt(problem.obs_uv[k])}\n"
            )
        for term in problem.trans_priors:
            fh.write(f"TPRIOR {term.pose} {fmt(term.target_xy)} {term.weight:.17g}\n")
        for term in problem.rot_priors:
            fh.write(
                f"RPRIOR {term.pose_i} {term.pose_j} {fmt(term.target)} {term.weight:.17g}\n"
            )
        for term in problem.relmot_priors:
            fh.write(
                f"MPRIOR {term.pose_i} {term.pose_j} {fmt(term.target)} {term.weight:.17g}\n"
            )


def load_problem(path) -> BaProblem:
    poses, intrs, points, obs = {}, {}, {}, []
    tpr, rpr, mpr = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "GEOSFM-BA-DUMP 1":
            raise ValueError(f"not a BA dump: {header!r}")
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            kind = tok[0]
            vals = [float(x) for x in tok[1:]]
            if kind == "POSE":
                poses[int(vals[0])] = (
                    int(vals[1]),
                    np.array(vals[2:11]).reshape(3, 3),
                    np.array(vals[11:14]),
                    np.array(vals[14:20]) > 0.5,
                )
            elif kind == "INTR":
                intrs[int(vals[0])] = (
                    np.array(vals[1:4]),
                    vals[4],
                    np.array(vals[5:8]) > 0.5,
                )
            elif kind == "POINT":
                points[int(vals[0])] = np.array(vals[1:4])
            elif kind == "OBS":
                obs.append((int(vals[0]), int(vals[1]), vals[2], vals[3]))
            elif kind == "TPRIOR":
                tpr.append(TranslationPrior(int(vals[0]), np.array(vals[1:3]), vals[3]))
            elif kind == "RPRIOR":
                rpr.append(
                    RotationPrior(
                        int(vals[0]), int(vals[1]), np.array(vals[2:11]).reshape(3, 3), vals[11]
                    )
                )
            elif kind == "MPRIOR":
                mpr.append(
                    RelativeMotionPrior(int(vals[0]), int(vals[1]), np.array(vals[2:5]), vals[5])
                )
            else:
                raise ValueError(f"unknown dump record {kind!r}")
    n = len(poses)
    m = len(intrs)
    return BaProblem(
        rotations=np.stack([poses[i][1] for i in range(n)]),
        translations=np.stack([poses[i][2] for i in range(n)]),
        intrinsics=np.stack([intrs[j][0] for j in range(m)]) if m else np.zeros((0, 3)),
        distortions=np.array([intrs[j][1] for j in range(m)]),
        pose_groups=np.array([poses[i][0] for i in range(n)], dtype=int),
        points=(
            np.stack([points[j] for j in range(len(points))])
            if points
            else np.zeros((0, 3))
        ),
        obs_cam=np.array([o[0] for o in obs], dtype=int),
        obs_pt=np.array([o[1] for o in obs], dtype=int),
        obs_uv=np.array([[o[2], o[3]] for o in obs]) if obs else np.zeros((0, 2)),
        fixed_pose_params=np.stack([poses[i][3] for i in range(n)]),
        fixed_intr_params=np.stack([intrs[j][2] for j in range(m)]) if m else None,
        trans_priors=tpr,
        rot_priors=rpr,
        relmot_priors=mpr,
    )

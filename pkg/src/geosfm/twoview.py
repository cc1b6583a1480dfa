"""Robust two-view epipolar geometry.

Essential matrices are estimated directly on intrinsics-normalized points
with a five-point minimal solver inside RANSAC, scored by Tukey-robustified
Sampson distances, then refit once on the inlier set. Relative pose is
recovered from the SVD of the essential matrix with a cheirality vote.

Conventions: the recovered relative pose maps camera-i coordinates to
camera-j coordinates, ``x_j = R @ x_i + t``, and the essential matrix
satisfies ``x_j^T E x_i = 0`` with ``E ~ [t]_x R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TwoViewError(RuntimeError):
    pass


class InsufficientMatchesError(TwoViewError):
    pass


class EstimationFailedError(TwoViewError):
    """All minimal samples were degenerate; no model found."""


class CheiralityError(TwoViewError):
    """No essential decomposition places enough points in front of both cameras."""


@dataclass
class TwoViewConfig:
    inlier_threshold: float = 4e-3  # Sampson distance, normalized units (~4 px at f=1000)
    tukey_c_factor: float = 3.0  # Tukey cutoff = factor * inlier_threshold
    max_iterations: int = 2000
    confidence: float = 0.99
    homography_ratio: float = 0.9  # H/E inlier ratio above which a pair is low-parallax

    @property
    def tukey_c(self) -> float:
        return self.tukey_c_factor * self.inlier_threshold


@dataclass
class EssentialEstimate:
    E: np.ndarray
    inlier_indices: np.ndarray
    mean_robust_residual: float
    inlier_ratio: float = 0.0
    n_matches: int = 0


@dataclass
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray  # unit norm; scale is unobservable
    cheirality_count: int = 0


def tukey_loss(r, c: float):
    """Tukey biweight: quadratic-ish near zero, constant c^2/6 beyond |r| = c."""
    if c <= 0:
        raise ValueError("Tukey cutoff must be positive")
    r = np.asarray(r, dtype=float)
    bound = c * c / 6.0
    u = np.clip(1.0 - (r / c) ** 2, 0.0, None)
    out = bound * (1.0 - u ** 3)
    return float(out) if out.ndim == 0 else out


def normalize_points(pts_px: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Pixel to normalized camera coordinates (intrinsics removed)."""
    pts = np.atleast_2d(np.asarray(pts_px, dtype=float))
    return np.column_stack(
        [(pts[:, 0] - K[0, 2]) / K[0, 0], (pts[:, 1] - K[1, 2]) / K[1, 1]]
    )


def epipolar_residual(E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Sampson distance of the epipolar constraint x_j^T E x_i for one match."""
    return float(sampson_distances(E, np.asarray(x_i)[None, :2], np.asarray(x_j)[None, :2])[0])


def sampson_distances(E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Vectorized Sampson distances for normalized points (N, 2)."""
    xi_h = np.column_stack([x_i, np.ones(len(x_i))])
    xj_h = np.column_stack([x_j, np.ones(len(x_j))])
    Exi = xi_h @ E.T  # rows: E @ x_i
    Etxj = xj_h @ E  # rows: E^T @ x_j
    num = np.sum(xj_h * Exi, axis=1)
    denom = Exi[:, 0] ** 2 + Exi[:, 1] ** 2 + Etxj[:, 0] ** 2 + Etxj[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(denom)
    d[~np.isfinite(d)] = np.inf
    return d


# ---------------------------------------------------------------------------
# Five-point minimal solver (Nister's hidden-variable elimination).
#
# E = x*E1 + y*E2 + z*E3 + E4 over the 4-dim null space of the 5 epipolar
# constraints. det(E) = 0 and the trace constraint 2*E*E^T*E - tr(E*E^T)*E = 0
# give ten cubic equations in (x, y, z). Eliminating x and y yields a
# degree-10 polynomial in z.
# ---------------------------------------------------------------------------

# columns of the 10x20 coefficient matrix: monomial (x_pow, y_pow, z_pow).
# The first ten columns are eliminated; the tail columns are all linear in
# x and y, which is what makes the 3x3 polynomial system below possible.
_MONOMIAL_COLUMNS = {
    (3, 0, 0): 0, (0, 3, 0): 1, (2, 1, 0): 2, (1, 2, 0): 3, (2, 0, 1): 4,
    (2, 0, 0): 5, (0, 2, 1): 6, (0, 2, 0): 7, (1, 1, 1): 8, (1, 1, 0): 9,
    (1, 0, 2): 10, (1, 0, 1): 11, (1, 0, 0): 12, (0, 1, 2): 13, (0, 1, 1): 14,
    (0, 1, 0): 15, (0, 0, 3): 16, (0, 0, 2): 17, (0, 0, 1): 18, (0, 0, 0): 19,
}

# Entries of E are linear in (x, y, z, 1); products are represented over a
# degree-2 monomial basis of length 10 and the degree-3 basis above. The
# fixed scatter matrices below turn outer products of coefficient vectors
# into those bases, replacing symbolic expansion at solve time.
_LIN_EXPON = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0))
_QUAD_EXPON = (
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (1, 0, 0), (0, 2, 0),
    (0, 1, 1), (0, 1, 0), (0, 0, 2), (0, 0, 1), (0, 0, 0),
)


def _product_tables():
    quad_index = {e: i for i, e in enumerate(_QUAD_EXPON)}
    A2 = np.zeros((10, 16))
    for a, ea in enumerate(_LIN_EXPON):
        for b, eb in enumerate(_LIN_EXPON):
            key = tuple(np.add(ea, eb))
            A2[quad_index[key], 4 * a + b] = 1.0
    A3 = np.zeros((20, 40))
    for q, eq in enumerate(_QUAD_EXPON):
        for l, el in enumerate(_LIN_EXPON):
            key = tuple(np.add(eq, el))
            A3[_MONOMIAL_COLUMNS[key], 4 * q + l] = 1.0
    return A2, A3


_A2, _A3 = _product_tables()


def _essential_constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """10x20 coefficient matrix of the det and trace constraints."""
    # L[r, s] = coefficients of E[r, s] over (x, y, z, 1)
    L = basis.transpose(1, 2, 0)

    def qmul(u, v):  # (... ,4) x (..., 4) -> (..., 10)
        return np.einsum("mk,...k->...m", _A2, (u[..., :, None] * v[..., None, :]).reshape(*u.shape[:-1], 16))

    def cmul(q, l):  # (..., 10) x (..., 4) -> (..., 20)
        return np.einsum("mk,...k->...m", _A3, (q[..., :, None] * l[..., None, :]).reshape(*q.shape[:-1], 40))

    # det(E) via cofactor expansion along the first row
    minor = lambda r0, r1, c0, c1: qmul(L[r0, c0], L[r1, c1]) - qmul(L[r0, c1], L[r1, c0])
    det = (
        cmul(minor(1, 2, 1, 2), L[0, 0])
        - cmul(minor(1, 2, 0, 2), L[0, 1])
        + cmul(minor(1, 2, 0, 1), L[0, 2])
    )

    # E E^T entries (degree 2) and trace
    EEt = np.zeros((3, 3, 10))
    for r in range(3):
        for c in range(3):
            EEt[r, c] = qmul(L[r], L[c]).sum(axis=0)
    trace = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]

    rows = [det]
    for r in range(3):
        for s in range(3):
            m = 2.0 * cmul(EEt[r], L[:, s]).sum(axis=0) - cmul(trace, L[r, s])
            rows.append(m)
    return np.array(rows)


def _zshift_minus(t_low: np.ndarray, t_high: np.ndarray) -> tuple[np.ndarray, ...]:
    """Combine two eliminated rows into z*row_low - row_high.

    Rows are tails over [xz^2, xz, x, yz^2, yz, y, z^3, z^2, z, 1]; the output
    is split into x, y, and constant z-polynomials (descending coefficients).
    """
    bx = np.array([t_low[0], t_low[1] - t_high[0], t_low[2] - t_high[1], -t_high[2]])
    by = np.array([t_low[3], t_low[4] - t_high[3], t_low[5] - t_high[4], -t_high[5]])
    bc = np.array(
        [t_low[6], t_low[7] - t_high[6], t_low[8] - t_high[7], t_low[9] - t_high[8], -t_high[9]]
    )
    return bx, by, bc


def five_point_candidates(x_i: np.ndarray, x_j: np.ndarray) -> list[np.ndarray]:
    """All real essential matrices consistent with five normalized matches.

    Returns an empty list for degenerate samples.
    """
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    a, b = x_i[:, 0], x_i[:, 1]
    c, d = x_j[:, 0], x_j[:, 1]
    ones = np.ones(len(a))
    Q = np.column_stack([c * a, c * b, c, d * a, d * b, d, a, b, ones])
    _, _, Vt = np.linalg.svd(Q)
    basis = Vt[5:9][::-1].reshape(4, 3, 3)  # E = x*B0 + y*B1 + z*B2 + B3

    A = _essential_constraint_matrix(basis)
    try:
        tails = np.linalg.solve(A[:, :10], A[:, 10:])
    except np.linalg.LinAlgError:
        return []
    if not np.all(np.isfinite(tails)):
        return []

    B = [
        _zshift_minus(tails[5], tails[4]),  # rows for x^2 and x^2*z
        _zshift_minus(tails[7], tails[6]),  # y^2 and y^2*z
        _zshift_minus(tails[9], tails[8]),  # xy and xy*z
    ]
    p1 = np.convolve(B[1][2], B[0][1]) - np.convolve(B[0][2], B[1][1])
    p2 = np.convolve(B[0][2], B[1][0]) - np.convolve(B[1][2], B[0][0])
    p3 = np.convolve(B[0][0], B[1][1]) - np.convolve(B[0][1], B[1][0])
    # all three products below are degree 10 (11 coefficients)
    n_poly = np.convolve(p1, B[2][0]) + np.convolve(p2, B[2][1]) + np.convolve(p3, B[2][2])

    nz = np.flatnonzero(np.abs(n_poly) > 1e-14)
    if nz.size == 0:
        return []
    n_poly = n_poly[nz[0]:]
    if len(n_poly) < 2:
        return []
    roots = np.roots(n_poly)

    candidates = []
    for z in roots:
        if abs(z.imag) > 1e-8 * (1.0 + abs(z.real)):
            continue
        z = float(z.real)
        # back-substitute x, y from the 3x3 polynomial system at this z
        Bz = np.array(
            [[np.polyval(B[r][0], z), np.polyval(B[r][1], z), np.polyval(B[r][2], z)]
             for r in range(3)]
        )
        _, sv, Vt_b = np.linalg.svd(Bz)
        v = Vt_b[-1]
        if abs(v[2]) < 1e-12:
            continue
        x, y = v[0] / v[2], v[1] / v[2]
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        norm = np.linalg.norm(E)
        if norm < 1e-12:
            continue
        candidates.append(E / norm)
    return candidates


def project_to_essential(E: np.ndarray) -> np.ndarray:
    """Nearest matrix with singular values (s, s, 0), Frobenius-normalized."""
    U, S, Vt = np.linalg.svd(E)
    s = (S[0] + S[1]) / 2.0
    E_proj = U @ np.diag([s, s, 0.0]) @ Vt
    return E_proj / np.linalg.norm(E_proj)


def _refit_on_inliers(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray | None:
    """Least-squares essential matrix from all inliers, projected to rank 2."""
    a, b = x_i[:, 0], x_i[:, 1]
    c, d = x_j[:, 0], x_j[:, 1]
    Q = np.column_stack([c * a, c * b, c, d * a, d * b, d, a, b, np.ones(len(a))])
    _, _, Vt = np.linalg.svd(Q)
    E = Vt[-1].reshape(3, 3)
    if not np.all(np.isfinite(E)):
        return None
    return project_to_essential(E)


def _ransac_iterations_needed(inlier_ratio: float, confidence: float) -> int:
    if inlier_ratio <= 0.0:
        return np.iinfo(np.int64).max
    fail_prob = 1.0 - min(inlier_ratio, 1.0) ** 5
    if fail_prob <= 0.0:
        return 0
    return int(math.ceil(math.log(max(1.0 - confidence, 1e-15)) / math.log(fail_prob)))


def estimate_essential_ransac(
    pts_i_px: np.ndarray,
    pts_j_px: np.ndarray,
    K_i: np.ndarray,
    K_j: np.ndarray,
    cfg: TwoViewConfig,
    rng: np.random.Generator,
) -> EssentialEstimate:
    """RANSAC over 5-point samples, Tukey-scored, with one inlier refit.

    Deterministic for a fixed ``rng`` state; model selection is the
    lexicographic reduction (max inliers, min robust score, min sample index),
    so parallel scoring joins reproducibly.
    """
    n = len(pts_i_px)
    if n < 5:
        raise InsufficientMatchesError(f"need at least 5 matches, got {n}")
    x_i = normalize_points(pts_i_px, K_i)
    x_j = normalize_points(pts_j_px, K_j)
    c = cfg.tukey_c

    best_key = None
    best_E = None
    needed = cfg.max_iterations
    for it in range(cfg.max_iterations):
        if it >= needed:
            break
        sample = rng.choice(n, size=5, replace=False)
        for E in five_point_candidates(x_i[sample], x_j[sample]):
            d = sampson_distances(E, x_i, x_j)
            n_inliers = int(np.sum(d < cfg.inlier_threshold))
            key = (-n_inliers, float(np.sum(tukey_loss(d, c))), it)
            if best_key is None or key < best_key:
                best_key = key
                best_E = E
                needed = min(
                    cfg.max_iterations,
                    _ransac_iterations_needed(n_inliers / n, cfg.confidence),
                )
    if best_E is None:
        raise EstimationFailedError("all minimal samples degenerate; no essential matrix found")

    E = project_to_essential(best_E)
    d = sampson_distances(E, x_i, x_j)
    inlier_mask = d < cfg.inlier_threshold
    # one local-optimization refit on the inlier set; reverted if it loses inliers
    if int(inlier_mask.sum()) >= 5:
        E_ref = _refit_on_inliers(x_i[inlier_mask], x_j[inlier_mask])
        if E_ref is not None:
            d_ref = sampson_distances(E_ref, x_i, x_j)
            mask_ref = d_ref < cfg.inlier_threshold
            if int(mask_ref.sum()) >= int(inlier_mask.sum()):
                E, d, inlier_mask = E_ref, d_ref, mask_ref
    if not inlier_mask.any():
        raise EstimationFailedError("refined model retains no inliers")

    return EssentialEstimate(
        E=E,
        inlier_indices=np.flatnonzero(inlier_mask),
        mean_robust_residual=float(np.mean(tukey_loss(d, c))),
        inlier_ratio=float(inlier_mask.mean()),
        n_matches=n,
    )


def _triangulate_midpoint(R: np.ndarray, t: np.ndarray, x_i: np.ndarray, x_j: np.ndarray):
    """DLT triangulation in camera-i frame for P0=[I|0], P1=[R|t]; (N,3)."""
    P0 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P1 = np.hstack([R, t[:, None]])
    out = np.empty((len(x_i), 3))
    for k in range(len(x_i)):
        A = np.stack(
            [
                x_i[k, 0] * P0[2] - P0[0],
                x_i[k, 1] * P0[2] - P0[1],
                x_j[k, 0] * P1[2] - P1[0],
                x_j[k, 1] * P1[2] - P1[1],
            ]
        )
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        out[k] = X[:3] / X[3] if abs(X[3]) > 1e-15 else np.full(3, np.inf)
    return out


def decompose_essential(
    E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray
) -> RelativePose:
    """Pick the (R, t) among the four SVD decompositions by cheirality vote.

    ``x_i`` and ``x_j`` are the inlier matches in normalized coordinates.
    """
    if len(x_i) < 1:
        raise CheiralityError("need at least one inlier to resolve the decomposition")
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for sign in (1.0, -1.0):
            tc = sign * t
            X = _triangulate_midpoint(R, tc, x_i, x_j)
            finite = np.all(np.isfinite(X), axis=1)
            X_safe = np.where(finite[:, None], X, 0.0)
            depth_i = X_safe[:, 2]
            depth_j = (X_safe @ R.T + tc)[:, 2]
            count = int(np.sum((depth_i > 0) & (depth_j > 0) & finite))
            if best is None or count > best[0]:
                best = (count, R, tc)
    count, R, tc = best
    if count < 0.5 * len(x_i):
        raise CheiralityError(
            f"only {count}/{len(x_i)} inliers in front of both cameras; bad pair"
        )
    return RelativePose(rotation=R, translation=tc / np.linalg.norm(tc), cheirality_count=count)


def _homography_from_four(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray | None:
    A = []
    for k in range(len(x_i)):
        xa, ya = x_i[k]
        xb, yb = x_j[k]
        A.append([-xa, -ya, -1, 0, 0, 0, xb * xa, xb * ya, xb])
        A.append([0, 0, 0, -xa, -ya, -1, yb * xa, yb * ya, yb])
    A = np.array(A)
    _, s, Vt = np.linalg.svd(A)
    H = Vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-15:
        return None
    return H / H[2, 2]


def homography_inlier_ratio(
    x_i: np.ndarray,
    x_j: np.ndarray,
    threshold: float,
    rng: np.random.Generator,
    max_iterations: int = 200,
) -> float:
    """Fraction of matches explained by a single homography (transfer error)."""
    n = len(x_i)
    if n < 4:
        return 0.0
    xi_h = np.column_stack([x_i, np.ones(n)])
    best = 0
    for _ in range(max_iterations):
        sample = rng.choice(n, size=4, replace=False)
        H = _homography_from_four(x_i[sample], x_j[sample])
        if H is None:
            continue
        proj = xi_h @ H.T
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = proj[:, :2] / proj[:, 2:3]
        err = np.linalg.norm(proj - x_j, axis=1)
        err[~np.isfinite(err)] = np.inf
        count = int(np.sum(err < threshold))
        if count > best:
            best = count
            if best == n:
                break
    return best / n

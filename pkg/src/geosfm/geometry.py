"""Rotation and rigid-transform helpers shared across the pipeline.

Conventions used everywhere in this package:

* World frame: right-handed ENU (X = East, Y = North, Z = Up), meters.
* Camera frame: X right, Y down, Z forward (optical axis).
* A pose stores the camera-to-world rotation and the camera center in the
  world frame, so ``x_world = R @ x_cam + t`` and
  ``x_cam = R.T @ (x_world - t)``.
* Yaw is measured counterclockwise about +Z starting at +X.
"""
from __future__ import annotations

import math

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, stable near the identity."""
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-12:
        # second-order series; error O(theta^4) is below double precision here
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-12:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if abs(math.pi - theta) < 1e-6:
        # near pi the antisymmetric part vanishes; recover axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs from off-diagonal entries relative to the largest axis entry
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and M[k, i] < 0:
                    axis[i] = -axis[i]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (theta / (2.0 * math.sin(theta)))


def yaw_rotation(theta: float) -> np.ndarray:
    """Rotation by ``theta`` about +Z (CCW from +X)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_from_rotation(R: np.ndarray) -> float:
    """Inverse of :func:`yaw_rotation` for yaw-only matrices; for general
    rotations, the heading of the rotated +X axis."""
    return math.atan2(R[1, 0], R[0, 0])


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm, reflection excluded."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    return U @ D @ Vt


def is_rotation(R: np.ndarray, atol: float = 1e-9) -> bool:
    return (
        R.shape == (3, 3)
        and np.allclose(R @ R.T, np.eye(3), atol=atol)
        and abs(np.linalg.det(R) - 1.0) <= atol
    )


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qw, qx, qy, qz) with qw >= 0."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    qw, qx, qy, qz = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform (R, t) with dst ~= R @ src + t.

    Scale-free Kabsch; inputs are (N, 3) with N >= 3 non-collinear points.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    R = project_to_rotation(H)
    t = mu_d - R @ mu_s
    return R, t


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate half-turn about any axis orthogonal to a
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return so3_exp(axis * math.pi)
    angle = math.atan2(s, c)
    return so3_exp(axis / s * angle)


def look_rotation(forward: np.ndarray, up: np.ndarray | None = None) -> np.ndarray:
    """Camera-to-world rotation for a camera whose optical axis points along
    ``forward`` with image rows kept level against ``up`` (default world +Z).

    Degenerate when forward is parallel to up.
    """
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    u = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=float)
    right = np.cross(f, u)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValueError("camera forward direction parallel to the up reference")
    right = right / n
    down = np.cross(f, right)
    return np.column_stack([right, down, f])

import numpy as np
import pytest

from conftest import points_in_front, project_points, random_pose
from geosfm.model import CameraIntrinsics, PoseSE3
from geosfm.pnp import (
    InsufficientCorrespondencesError,
    PnPConfig,
    PnPRansacFailure,
    PosePriorContext,
    p3p_solve,
    refine_pose,
    register_view_pnp,
)

INTR = CameraIntrinsics(1000.0, (640.0, 480.0))


class TestP3P:
    def test_exact_solutions(self, rng):
        hits = 0
        for _ in range(100):
            pose = random_pose(rng)
            X = points_in_front(pose, rng, 3)
            bearings = (X - pose.translation) @ pose.rotation
            bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
            best = min(
                (
                    max(
                        np.linalg.norm(p.rotation - pose.rotation),
                        np.linalg.norm(p.translation - pose.translation),
                    )
                    for p in p3p_solve(X, bearings)
                ),
                default=np.inf,
            )
            hits += best < 1e-6
        assert hits == 100

    def test_degenerate_duplicate_points(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 3)
        X[1] = X[0]
        bearings = (X - pose.translation) @ pose.rotation
        bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
        assert p3p_solve(X, bearings) == []


class TestRegister:
    def test_noise_free(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 30)
        uv = project_points(INTR, pose, X)
        res = register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))
        assert np.linalg.norm(res.pose.translation - pose.translation) < 1e-6
        # rotation error (radians) through the log map, stable near identity
        from geosfm.geometry import so3_log

        assert np.linalg.norm(so3_log(res.pose.rotation.T @ pose.rotation)) < 1e-8
        assert res.inlier_count == 30

    def test_outlier_separation(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 40)
        uv = project_points(INTR, pose, X)
        bad = rng.choice(40, 10, replace=False)
        uv[bad] += rng.uniform(40, 150, size=(10, 2)) * np.sign(rng.normal(size=(10, 2)))
        res = register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))
        assert set(res.inlier_indices.tolist()) == set(range(40)) - set(bad.tolist())

    def test_insufficient_correspondences(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 3)
        uv = project_points(INTR, pose, X)
        with pytest.raises(InsufficientCorrespondencesError):
            register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))

    def test_ransac_failure_on_junk(self, rng):
        X = rng.normal(size=(30, 3)) * 5
        uv = rng.uniform(0, 1000, size=(30, 2))
        with pytest.raises(PnPRansacFailure):
            register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))

    def test_covariance_properties(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 50)
        uv = project_points(INTR, pose, X) + rng.normal(scale=0.5, size=(50, 2))
        res = register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))
        C = res.covariance
        assert C.shape == (6, 6)
        assert np.allclose(C, C.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(C) > -1e-10)

    def test_bad_prior_never_degrades(self, rng):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 40)
        uv = project_points(INTR, pose, X)
        bogus_prior_pose = PoseSE3(np.eye(3), pose.translation + [200.0, -150.0, 0])
        res_plain = register_view_pnp(X, uv, INTR, PnPConfig(), np.random.default_rng(0))
        res_prior = register_view_pnp(
            X, uv, INTR, PnPConfig(), np.random.default_rng(0),
            prior_pose=bogus_prior_pose,
        )
        assert res_prior.inlier_count >= res_plain.inlier_count
        assert np.linalg.norm(res_prior.pose.translation - pose.translation) < 1e-6

    def test_prior_terms_pull_position(self, rng):
        # with few, noisy points and a strong translation prior, the refined
        # position moves toward the prior compared to the unconstrained fit
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 8)
        uv = project_points(INTR, pose, X) + rng.normal(scale=2.0, size=(8, 2))
        cfg = PnPConfig(min_inliers=4)
        free = register_view_pnp(X, uv, INTR, cfg, np.random.default_rng(0))
        target = pose.translation[:2] + np.array([0.5, -0.5])
        ctx = PosePriorContext(trans_target=target, trans_weight=50.0)
        pulled = register_view_pnp(
            X, uv, INTR, cfg, np.random.default_rng(0), prior=ctx
        )
        d_free = np.linalg.norm(free.pose.translation[:2] - target)
        d_pulled = np.linalg.norm(pulled.pose.translation[:2] - target)
        assert d_pulled < d_free


def test_refine_pose_descends(rng):
    pose = random_pose(rng)
    X = points_in_front(pose, rng, 25)
    uv = project_points(INTR, pose, X)
    from geosfm.geometry import so3_exp

    start = PoseSE3(pose.rotation @ so3_exp([0.03, -0.02, 0.01]), pose.translation + 0.1)
    refined, cost = refine_pose(start, INTR, X, uv)
    assert cost < 1e-10
    assert np.linalg.norm(refined.translation - pose.translation) < 1e-6

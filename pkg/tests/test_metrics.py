import numpy as np
import pytest

from geosfm.geometry import so3_exp, yaw_rotation
from geosfm.metrics import (
    DegenerateConfigurationError,
    EmptyIntersectionError,
    MetricsError,
    SimilarityTransform,
    align_umeyama,
    build_report,
    coverage,
    evaluate_positions,
    mean_reprojection_error,
    positional_rmse,
    reprojection_rms,
)
from geosfm.model import (
    CameraIntrinsics,
    Point3D,
    PoseSE3,
    Reconstruction,
    Track,
    View,
)


class TestUmeyama:
    def test_identity(self, rng):
        X = rng.normal(size=(4, 3))
        tf = align_umeyama(X, X)
        assert abs(tf.scale - 1.0) < 1e-12
        assert np.allclose(tf.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(tf.translation, 0.0, atol=1e-12)

    def test_forward_construction(self, rng):
        X = rng.normal(size=(6, 3))
        R = yaw_rotation(np.pi / 2)
        Y = 2.0 * X @ R.T + np.array([1.0, 2.0, 3.0])
        tf = align_umeyama(X, Y)
        assert abs(tf.scale - 2.0) < 1e-10
        assert np.allclose(tf.rotation, R, atol=1e-10)
        assert np.allclose(tf.translation, [1, 2, 3], atol=1e-9)
        assert np.allclose(tf.apply(X), Y, atol=1e-9)

    def test_random_similarity_recovery(self, rng):
        for _ in range(100):
            X = rng.normal(size=(5, 3))
            R = so3_exp(rng.normal(size=3))
            s = rng.uniform(0.1, 10.0)
            t = rng.normal(size=3) * 5
            tf = align_umeyama(X, s * X @ R.T + t)
            assert abs(tf.scale - s) < 1e-10 * s
            assert np.allclose(tf.rotation, R, atol=1e-10)
            assert np.linalg.det(tf.rotation) > 0  # never a reflection

    def test_collinear_degenerate(self):
        X = np.outer(np.arange(4, dtype=float), np.array([1.0, 2.0, 0.5]))
        with pytest.raises(DegenerateConfigurationError):
            align_umeyama(X, X + 1.0)

    def test_too_few_points(self, rng):
        X = rng.normal(size=(2, 3))
        with pytest.raises(DegenerateConfigurationError):
            align_umeyama(X, X)

    def test_local_optimality(self, rng):
        # perturbing the optimum never decreases the alignment cost
        X = rng.normal(size=(8, 3))
        Y = 1.7 * X @ so3_exp(rng.normal(size=3)).T + rng.normal(size=3)
        Y += rng.normal(scale=0.05, size=Y.shape)
        tf = align_umeyama(X, Y)

        def cost(s, R, t):
            return float(np.sum((Y - (s * X @ R.T + t)) ** 2))

        best = cost(tf.scale, tf.rotation, tf.translation)
        for _ in range(100):
            ds = 1.0 + rng.normal() * 1e-4
            dR = so3_exp(rng.normal(size=3) * 1e-4)
            dt = rng.normal(size=3) * 1e-4
            perturbed = cost(tf.scale * ds, dR @ tf.rotation, tf.translation + dt)
            assert perturbed >= best - 1e-12


class TestRmse:
    def test_perfect(self):
        X = np.arange(9, dtype=float).reshape(3, 3)
        assert positional_rmse(X, X) == (0.0, 0.0, 0.0)

    def test_two_view_arithmetic(self):
        est = np.array([[3.0, 0, 0], [0, 4.0, 0]])
        gt = np.zeros((2, 3))
        mn, rmse, mx = positional_rmse(est, gt)
        assert (mn, mx) == (3.0, 4.0)
        assert abs(rmse - np.sqrt(12.5)) < 1e-12

    def test_homogeneous_scaling(self, rng):
        est = rng.normal(size=(5, 3))
        gt = rng.normal(size=(5, 3))
        mn, rm, mx = positional_rmse(est, gt)
        mn2, rm2, mx2 = positional_rmse(gt + 3.0 * (est - gt), gt)
        assert np.allclose([mn2, rm2, mx2], [3 * mn, 3 * rm, 3 * mx])

    def test_empty_rejected(self):
        with pytest.raises(EmptyIntersectionError):
            positional_rmse(np.zeros((0, 3)), np.zeros((0, 3)))


class TestCoverage:
    def test_fraction_values(self):
        assert abs(coverage(178, 179) - 0.9944) < 5e-5
        assert abs(coverage(364, 365) - 0.9973) < 5e-5
        assert coverage(0, 10) == 0.0
        assert coverage(10, 10) == 1.0

    def test_exact_product(self):
        for a, b in ((3, 7), (178, 179), (0, 5)):
            assert coverage(a, b) * b == a

    def test_invalid_inputs(self):
        with pytest.raises(MetricsError):
            coverage(1, 0)
        with pytest.raises(MetricsError):
            coverage(5, 3)


class TestReprojection:
    def _recon_with_observation(self, residual_px):
        views = {0: View(0, "a", 200, 200, "ground")}
        views[0].intrinsics = CameraIntrinsics(100.0, (100.0, 100.0))
        rec = Reconstruction(views=views, keypoints={0: {}})
        rec.register(0, PoseSE3(np.eye(3), np.zeros(3)))
        X = np.array([0.0, 0.0, 5.0])
        from geosfm.ba import project_point

        uv, _ = project_point(views[0].intrinsics, views[0].pose, X)
        rec.keypoints[0][0] = uv + residual_px
        rec.tracks = [Track(0, [(0, 0)], point=Point3D(X))]
        return rec

    def test_exact_gives_zero(self):
        rec = self._recon_with_observation(np.zeros(2))
        assert mean_reprojection_error(rec) == 0.0

    def test_single_observation_unit_residual(self):
        rec = self._recon_with_observation(np.array([1.0, 0.0]))
        assert abs(mean_reprojection_error(rec) - 1.0) < 1e-12
        assert abs(reprojection_rms(rec) - 1.0) < 1e-12

    def test_matches_independent_recomputation(self, rng):
        # rebuild the mean over an explicitly projected set of observations
        from geosfm.ba import project_point
        from geosfm.geometry import look_rotation

        views = {}
        keypoints = {}
        rec = Reconstruction(views=views, keypoints=keypoints)
        points = [Point3D(rng.uniform(-1, 1, 3) + [0, 0, 6]) for _ in range(10)]
        for i in range(3):
            views[i] = View(i, f"v{i}", 2000, 2000, "ground")
            views[i].intrinsics = CameraIntrinsics(500.0, (1000.0, 1000.0))
            center = np.array([np.cos(i), np.sin(i), 0.0])
            rec.register(i, PoseSE3(look_rotation([0, 0, 1.0]) if False else np.eye(3), center))
            keypoints[i] = {}
        expected = []
        rec.tracks = []
        for j, pt in enumerate(points):
            obs = []
            for i in views:
                uv, w = project_point(views[i].intrinsics, views[i].pose, pt.position)
                noisy = uv + rng.normal(scale=1.0, size=2)
                keypoints[i][j] = noisy
                obs.append((i, j))
                expected.append(float(np.sum((uv - noisy) ** 2)))
            rec.tracks.append(Track(j, obs, point=pt))
        assert abs(mean_reprojection_error(rec) - np.mean(expected)) < 1e-9
        assert abs(reprojection_rms(rec) - np.sqrt(np.mean(expected))) < 1e-9

    def test_no_observations_rejected(self):
        rec = Reconstruction(views={}, keypoints={})
        with pytest.raises(MetricsError):
            mean_reprojection_error(rec)


class TestAlignmentEquivariance:
    def test_pre_transformed_estimates_same_rmse(self, rng):
        gt = {i: rng.normal(size=3) * 10 for i in range(8)}
        est = {i: gt[i] + rng.normal(size=3) * 0.3 for i in range(8)}
        _, err_base = evaluate_positions(est, gt)
        R = so3_exp(rng.normal(size=3))
        s = 2.5
        t = np.array([10.0, -4.0, 2.0])
        moved = {i: s * R @ est[i] + t for i in est}
        _, err_moved = evaluate_positions(moved, gt)
        for key in err_base:
            assert abs(err_base[key] - err_moved[key]) < 1e-9


class TestReport:
    def _views(self):
        views = {}
        for i in range(4):
            views[i] = View(i, f"g{i}", 10, 10, "ground")
        for i in range(4, 7):
            views[i] = View(i, f"a{i}", 10, 10, "aerial")
        views[7] = View(7, "sat", 10, 10, "satellite")
        return views

    def test_denominators(self):
        views = self._views()
        registered = {0, 1, 2, 4, 5}
        report = build_report(
            views, registered, per_view_errors={0: 1.0, 1: 2.0},
            reproj_mean_px2=4.0, reproj_rms_px=2.0, has_matches=set(range(7)),
        )
        # satellite with no matches is excluded from the denominator
        assert report.n_input == 7
        assert report.n_estimated == 5
        assert abs(report.coverage_total - 5 / 7) < 1e-12
        assert abs(report.coverage_ground - 3 / 4) < 1e-12
        assert abs(report.coverage_aerial - 2 / 3) < 1e-12
        assert abs(report.rmse_mean_m - np.sqrt(2.5)) < 1e-12
        d = report.as_dict()
        for key in (
            "rmse_min_m", "rmse_mean_m", "rmse_max_m", "coverage_aerial",
            "coverage_ground", "coverage_total", "reproj_mean_px2",
            "reproj_rms_px", "n_estimated", "n_input",
        ):
            assert key in d

    def test_satellite_included_when_matched(self):
        views = self._views()
        report = build_report(
            views, {7}, per_view_errors={}, reproj_mean_px2=None,
            reproj_rms_px=None, has_matches={7},
        )
        assert report.n_input == 8
        assert report.n_estimated == 1

"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers. Run with `pytest -v -s`.

Every scenario is driven end to end from synthetic scenes with exact ground
truth; no external data or models are involved.
"""
import time

import numpy as np
import pytest

from conftest import points_in_front, random_pose
from geosfm.ba import (
    BaOptions,
    BaProblem,
    PriorWeightConfig,
    RelativeMotionPrior,
    RotationPrior,
    TranslationPrior,
    _Solver,
    _apply_step,
    confidence_weights,
    reprojection_jacobians,
    reprojection_residual,
    run_bundle_adjustment,
)
from geosfm.cli import main as cli_main
from geosfm.engine import EngineConfig, run_incremental
from geosfm.geometry import look_rotation, so3_exp
from geosfm.metrics import align_umeyama, coverage, evaluate_positions, reprojection_rms
from geosfm.model import CameraIntrinsics, PoseSE3
from geosfm.synthetic import SceneSpec, generate_scene
from geosfm.triangulate import TriangulationConfig, triangulate_dlt, triangulate_multiview
from geosfm.twoview import tukey_loss


def _report(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE PASS {name}: {detail}")


def _rmse(recon, ground_truth) -> float:
    est = {v: recon.views[v].pose.translation for v in recon.registered_ids}
    gt = {g.view_id: g.position for g in ground_truth}
    _, errors = evaluate_positions(est, gt)
    err = np.array(list(errors.values()))
    return float(np.sqrt(np.mean(err**2)))


def test_coverage_arithmetic_matches_published_table():
    t0 = time.perf_counter()
    c_aerial = coverage(178, 179)
    c_total = coverage(364, 365)
    elapsed = time.perf_counter() - t0
    assert round(c_aerial, 4) == 0.9944
    assert round(c_total, 4) == 0.9973
    assert elapsed < 1e-3
    _report(
        "coverage-arithmetic",
        f"178/179 -> {c_aerial:.4f}, 364/365 -> {c_total:.4f} in {elapsed * 1e6:.0f} us",
    )


def test_synthetic_end_to_end_clean():
    scene = generate_scene(SceneSpec(rng_seed=42))
    assert scene.spec.n_ground + scene.spec.n_aerial == 20
    t0 = time.perf_counter()
    recon, _ = run_incremental(scene.model, scene.priors, EngineConfig(seed=0, workers=1))
    elapsed = time.perf_counter() - t0
    cov = len(recon.registered_ids) / len(recon.views)
    rmse = _rmse(recon, scene.ground_truth)
    rms_px = reprojection_rms(recon)
    assert cov == 1.0
    assert rmse < 1e-3
    assert rms_px < 1e-3
    assert elapsed < 60.0
    _report(
        "clean-end-to-end",
        f"coverage {cov:.2f}, rmse {rmse:.2e} m, reproj {rms_px:.2e} px, {elapsed:.1f} s",
    )


def test_synthetic_end_to_end_contaminated():
    spec = SceneSpec(
        rng_seed=7,
        pixel_noise_sigma=1.0,
        outlier_fraction=0.3,
        prior_noise_xy=0.5,
        prior_noise_yaw=0.03,
        prior_outlier_fraction=0.1,
        extent=100.0,
        aerial_height=50.0,
        n_points=900,
    )
    scene = generate_scene(spec)
    cfg = EngineConfig(seed=0)
    cfg.aerial_height = 50.0  # prior lift height matches the flight altitude
    assert cfg.priors.alpha == 0.05 and cfg.priors.beta == 0.05  # defaults
    t0 = time.perf_counter()
    recon, _ = run_incremental(scene.model, scene.priors, cfg)
    elapsed = time.perf_counter() - t0
    cov = len(recon.registered_ids) / len(recon.views)
    rmse = _rmse(recon, scene.ground_truth)
    # exclusion of labeled outlier matches from the final inlier set: a match
    # survives only if both keypoints sit in the same triangulated track
    membership = {}
    for track in recon.tracks:
        if track.point is None:
            continue
        for v, k in track.observations:
            membership[(v, k)] = track.track_id
    excluded = sum(
        1
        for (va, vb, ka, kb) in scene.outlier_matches
        if membership.get((va, ka)) is None
        or membership.get((va, ka)) != membership.get((vb, kb))
    )
    exclusion = excluded / len(scene.outlier_matches)
    assert cov >= 0.95
    assert rmse < 0.1
    assert exclusion >= 0.95
    assert elapsed < 300.0
    _report(
        "contaminated-end-to-end",
        f"coverage {cov:.2f}, rmse {rmse:.3f} m, outlier exclusion "
        f"{exclusion:.4f} ({excluded}/{len(scene.outlier_matches)}), {elapsed:.0f} s",
    )


def test_prior_ablation_direction():
    # low-overlap seam: cross-band pairs capped at 10 matches and heavily
    # confused by the half-turn repetitive structure
    spec = SceneSpec(
        rng_seed=11,
        pixel_noise_sigma=1.0,
        prior_noise_xy=0.3,
        prior_noise_yaw=0.02,
        extent=80.0,
        aerial_height=40.0,
        n_points=800,
        crossband_pair_cap=10,
        symmetric_landmarks=True,
        crossband_confusion_fraction=0.95,
    )
    scene = generate_scene(spec)
    for key, pair in scene.model.matches.items():
        a_cls = scene.model.views[key[0]].altitude_class
        b_cls = scene.model.views[key[1]].altitude_class
        if a_cls != b_cls:
            assert len(pair) <= 10

    def run(priors):
        cfg = EngineConfig(seed=0)
        cfg.aerial_height = 40.0
        recon, _ = run_incremental(scene.model, priors, cfg)
        return _rmse(recon, scene.ground_truth), len(recon.registered_ids)

    rmse_with, cov_with = run(scene.priors)
    rmse_without, cov_without = run([])
    assert rmse_with < rmse_without
    _report(
        "prior-ablation-direction",
        f"with priors {rmse_with:.3f} m ({cov_with}/20) < "
        f"without {rmse_without:.3f} m ({cov_without}/20)",
    )


def test_ba_gradient_suite():
    rng = np.random.default_rng(123)
    t0 = time.perf_counter()
    eps = 1e-6
    worst_reproj = 0.0
    for _ in range(200):
        pose = random_pose(rng)
        X = points_in_front(pose, rng, 1)[0]
        intr = CameraIntrinsics(
            rng.uniform(400, 2500),
            (rng.uniform(200, 900), rng.uniform(150, 700)),
            rng.uniform(-0.2, 0.2),
        )
        obs = rng.uniform(0, 1200, 2)
        J_pose, J_intr, J_pt = reprojection_jacobians(intr, pose, X)
        for col in range(6):
            d = np.zeros(6)
            d[col] = eps
            pp = PoseSE3(pose.rotation @ so3_exp(d[:3]), pose.translation + d[3:])
            pm = PoseSE3(pose.rotation @ so3_exp(-d[:3]), pose.translation - d[3:])
            fd = (
                reprojection_residual(intr, pp, X, obs)
                - reprojection_residual(intr, pm, X, obs)
            ) / (2 * eps)
            worst_reproj = max(
                worst_reproj, np.max(np.abs(fd - J_pose[:, col]) / (1 + np.abs(fd)))
            )
        for col in range(3):
            d = np.zeros(3)
            d[col] = eps
            fd = (
                reprojection_residual(intr, pose, X + d, obs)
                - reprojection_residual(intr, pose, X - d, obs)
            ) / (2 * eps)
            worst_reproj = max(
                worst_reproj, np.max(np.abs(fd - J_pt[:, col]) / (1 + np.abs(fd)))
            )

    worst_prior = 0.0
    options = BaOptions()
    for _ in range(200):
        problem = BaProblem(
            rotations=np.stack([so3_exp(rng.normal(size=3)), so3_exp(rng.normal(size=3))]),
            translations=rng.normal(size=(2, 3)),
            intrinsics=np.zeros((0, 3)),
            distortions=np.zeros(0),
            pose_groups=np.zeros(2, int),
            points=np.zeros((0, 3)),
            obs_cam=np.zeros(0, int),
            obs_pt=np.zeros(0, int),
            obs_uv=np.zeros((0, 2)),
            trans_priors=[TranslationPrior(0, rng.normal(size=2), rng.uniform(0.2, 2))],
            rot_priors=[RotationPrior(0, 1, so3_exp(rng.normal(size=3)), rng.uniform(0.2, 2))],
            relmot_priors=[
                RelativeMotionPrior(0, 1, rng.normal(size=3), rng.uniform(0.2, 2))
            ],
        )
        solver = _Solver(problem, options)
        solver.assemble(
            problem.rotations, problem.translations, problem.intrinsics, problem.points
        )
        analytic = -2.0 * solver._b_c
        fd = np.zeros(12)
        for k in range(12):
            dc = np.zeros(12)
            dc[k] = eps
            plus = _apply_step(
                problem, problem.rotations, problem.translations,
                problem.intrinsics, problem.points, dc, np.zeros((0, 3)),
            )
            minus = _apply_step(
                problem, problem.rotations, problem.translations,
                problem.intrinsics, problem.points, -dc, np.zeros((0, 3)),
            )
            fd[k] = (solver.cost_at(*plus).total - solver.cost_at(*minus).total) / (2 * eps)
        worst_prior = max(worst_prior, np.max(np.abs(analytic - fd) / (1 + np.abs(fd))))
    elapsed = time.perf_counter() - t0
    assert worst_reproj < 1e-4
    assert worst_prior < 1e-4
    assert elapsed < 10.0
    _report(
        "ba-gradient-suite",
        f"reprojection {worst_reproj:.2e}, priors {worst_prior:.2e} rel err, {elapsed:.1f} s",
    )


def test_triangulation_oracle():
    rng = np.random.default_rng(321)
    K = np.array([[1000.0, 0, 500.0], [0, 1000.0, 400.0], [0, 0, 1]])

    def camera(target, ang, radius=6.0):
        center = target + radius * np.array([np.cos(ang), np.sin(ang), 0.25])
        return PoseSE3(look_rotation(target - center), center).projection_matrix(K)

    def project(P, X):
        h = P @ np.append(X, 1.0)
        return h[:2] / h[2]

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        target = rng.uniform(-2, 2, 3)
        Ps = [camera(target, 2 * np.pi * i / 4 + rng.uniform(0, 0.3)) for i in range(4)]
        res = triangulate_multiview([(P, project(P, target)) for P in Ps])
        worst = max(worst, float(np.linalg.norm(res.point.position - target)))
    assert worst < 1e-8

    cfg = TriangulationConfig(huber_factor=1e9)
    worse = 0
    for _ in range(1000):
        target = rng.uniform(-2, 2, 3)
        Ps = [camera(target, 2 * np.pi * i / 5 + rng.uniform(0, 0.2)) for i in range(5)]
        uvs = [project(P, target) + rng.normal(scale=1.0, size=2) for P in Ps]

        def cost(X):
            return sum(float(np.sum((project(P, X) - uv) ** 2)) for P, uv in zip(Ps, uvs))

        X_dlt = triangulate_dlt(np.stack(Ps), np.stack(uvs))
        res = triangulate_multiview(list(zip(Ps, uvs)), cfg)
        if cost(res.point.position) > cost(X_dlt) + 1e-9:
            worse += 1
    elapsed = time.perf_counter() - t0
    assert worse == 0
    assert elapsed < 10.0
    _report(
        "triangulation-oracle",
        f"noise-free worst {worst:.2e} m, LM beat DLT on 1000/1000 noisy, {elapsed:.1f} s",
    )


def test_umeyama_oracle():
    rng = np.random.default_rng(55)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        X = rng.normal(size=(rng.integers(4, 12), 3))
        R = so3_exp(rng.normal(size=3))
        s = rng.uniform(0.05, 20.0)
        t = rng.normal(size=3) * 10
        tf = align_umeyama(X, s * X @ R.T + t)
        assert np.linalg.det(tf.rotation) > 0
        worst = max(
            worst,
            abs(tf.scale - s) / s,
            float(np.abs(tf.rotation - R).max()),
            float(np.abs(tf.translation - t).max() / (1 + np.abs(t).max())),
        )
    elapsed = time.perf_counter() - t0
    assert worst < 1e-10
    assert elapsed < 1.0
    _report("umeyama-oracle", f"worst recovery error {worst:.2e}, {elapsed * 1e3:.0f} ms")


def test_robust_loss_properties():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(500):
        c = rng.uniform(0.01, 30.0)
        r = rng.uniform(-3 * c, 3 * c)
        v = tukey_loss(r, c)
        worst = max(worst, abs(v - tukey_loss(-r, c)))  # even
        assert v <= c * c / 6.0 + 1e-12 * c * c  # bounded
        assert v >= -1e-15
    # continuity and smoothness at the cutoff
    for c in (0.5, 1.0, 7.0):
        assert abs(tukey_loss(c, c) - c * c / 6.0) < 1e-12 * c * c
        # analytic derivative r*(1 - (r/c)^2)^2 vanishes at |r| = c
        r = c * (1.0 - 1e-9)
        slope_inside = r * (1.0 - (r / c) ** 2) ** 2
        assert abs(slope_inside) < 1e-12
    spot = tukey_loss(0.5, 1.0)
    assert abs(spot - 37.0 / 384.0) < 1e-12
    _report(
        "robust-loss-properties",
        f"even/bounded/C1 verified, rho(0.5; c=1) = {spot:.10f} = 37/384",
    )


def test_reconstruction_determinism(tmp_path):
    scene_dir = tmp_path / "scene"
    generate_scene(
        SceneSpec(n_ground=8, n_aerial=4, n_points=350, rng_seed=21), out_dir=scene_dir
    )
    outputs = {}
    for tag, workers in (("w1a", "1"), ("w1b", "1"), ("w8a", "8"), ("w8b", "8")):
        out = tmp_path / tag
        code = cli_main([
            "reconstruct",
            "--corr", str(scene_dir / "correspondences.txt"),
            "--priors", str(scene_dir / "priors.txt"),
            "--out", str(out),
            "--seed", "3",
            "--workers", workers,
        ])
        assert code == 0
        outputs[tag] = (out / "poses.txt").read_bytes()
    assert outputs["w1a"] == outputs["w1b"] == outputs["w8a"] == outputs["w8b"]
    _report(
        "determinism",
        f"identical poses files across repeats and worker counts (1, 8), "
        f"{len(outputs['w1a'])} bytes",
    )


def test_weight_law():
    cfg = PriorWeightConfig(alpha=0.01, beta=0.01)
    w_t, w_r = confidence_weights(100, 100, cfg)
    assert abs(w_t - 0.5) < 1e-15 and abs(w_r - 0.5) < 1e-15
    for alpha in (0.001, 0.01, 0.05, 0.5):
        c = PriorWeightConfig(alpha=alpha, beta=alpha)
        for n in (0, 1, 7, 100, 5000):
            w_t, w_r = confidence_weights(n, n, c)
            assert abs(w_t - 1.0 / (1.0 + alpha * n)) < 1e-15
            assert abs(w_r - 1.0 / (1.0 + alpha * n)) < 1e-15

    # two-view problem: prior cost breakdown strictly decreasing in the
    # injected match count behind the view weight
    costs = []
    for count in (0, 10, 100, 1000, 100000):
        c = PriorWeightConfig()
        w_t, _ = confidence_weights(count, 0, c)
        problem = BaProblem(
            rotations=np.eye(3)[None].repeat(2, axis=0),
            translations=np.array([[1.0, 0.0, 0.0], [4.0, 0.0, 0.0]]),
            intrinsics=np.zeros((0, 3)),
            distortions=np.zeros(0),
            pose_groups=np.zeros(2, int),
            points=np.zeros((0, 3)),
            obs_cam=np.zeros(0, int),
            obs_pt=np.zeros(0, int),
            obs_uv=np.zeros((0, 2)),
            trans_priors=[
                TranslationPrior(0, np.zeros(2), float(np.sqrt(c.lambda_t * w_t)))
            ],
            fixed_pose_params=np.ones((2, 6), bool),
        )
        result = run_bundle_adjustment(problem, BaOptions(max_iterations=1))
        costs.append(result.initial_cost.translation_prior)
    assert all(a > b for a, b in zip(costs, costs[1:]))
    _report(
        "weight-law",
        f"w(0.01, 100) = 0.5 exactly; prior cost strictly decreasing: "
        f"{['%.3g' % c for c in costs]}",
    )

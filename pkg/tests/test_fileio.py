import math
import warnings

import numpy as np
import pytest

from geosfm import fileio
from geosfm.fileio import (
    FormatWarning,
    GeometricPrior,
    GroundTruthPosition,
    ParseError,
    convert_gps_to_local,
    parse_correspondences,
    parse_ground_truth,
    parse_poses,
    parse_priors,
    parse_report,
    write_correspondences,
    write_ground_truth,
    write_outputs,
    write_priors,
    write_report,
)
from geosfm.model import PoseSE3, Point3D, Reconstruction, Track, View, CameraIntrinsics
from geosfm.geometry import so3_exp
from geosfm.synthetic import SceneSpec, generate_scene

CORR = """CVDSFM-CORR 1
# two views, three keypoints each, two matches
V 0 cam0 100 80 ground
V 1 cam1 100 80 aerial
K 0 0 10.5 20.5
K 0 1 30 40
K 0 2 50 60
K 1 0 11 21
K 1 1 31 41
K 1 2 51 61
M 0 1 0 0 0.9
M 0 1 1 1 0.8
"""


def _write(tmp_path, text, name="f.txt"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestCorrespondences:
    def test_basic_parse(self, tmp_path):
        model = parse_correspondences(_write(tmp_path, CORR))
        assert set(model.views) == {0, 1}
        assert model.views[1].altitude_class == "aerial"
        assert len(model.keypoints[0]) == 3
        assert len(model.matches[(0, 1)]) == 2
        assert np.allclose(model.keypoints[0][0], [10.5, 20.5])

    def test_min_score_filter(self, tmp_path):
        model = parse_correspondences(_write(tmp_path, CORR), min_score=0.85)
        assert len(model.matches[(0, 1)]) == 1

    def test_missing_header(self, tmp_path):
        with pytest.raises(ParseError) as err:
            parse_correspondences(_write(tmp_path, "V 0 a 10 10 ground\n"))
        assert err.value.line_no == 1

    def test_dangling_keypoint(self, tmp_path):
        bad = CORR + "M 0 1 2 99 0.5\n"
        with pytest.raises(ParseError, match="unknown keypoint 99"):
            parse_correspondences(_write(tmp_path, bad))

    def test_duplicate_view(self, tmp_path):
        bad = CORR + "V 0 again 10 10 ground\n"
        with pytest.raises(ParseError, match="duplicate view id"):
            parse_correspondences(_write(tmp_path, bad))

    def test_malformed_line_number(self, tmp_path):
        bad = "CVDSFM-CORR 1\nV 0 cam0 100 80 ground\nK 0 zero 1 2\n"
        with pytest.raises(ParseError) as err:
            parse_correspondences(_write(tmp_path, bad))
        assert err.value.line_no == 3

    def test_out_of_bounds_keypoint(self, tmp_path):
        bad = "CVDSFM-CORR 1\nV 0 cam0 100 80 ground\nK 0 0 100 10\n"
        with pytest.raises(ParseError, match="outside image bounds"):
            parse_correspondences(_write(tmp_path, bad))

    def test_non_canonical_pair(self, tmp_path):
        bad = CORR + "M 1 0 0 0 0.5\n"
        with pytest.raises(ParseError, match="canonical"):
            parse_correspondences(_write(tmp_path, bad))

    def test_round_trip(self, tmp_path):
        scene = generate_scene(SceneSpec(n_ground=4, n_aerial=2, n_points=120, rng_seed=1))
        path = tmp_path / "corr.txt"
        write_correspondences(scene.model, path)
        reparsed = parse_correspondences(str(path))
        assert set(reparsed.views) == set(scene.model.views)
        for vid in scene.model.views:
            assert set(reparsed.keypoints[vid]) == set(scene.model.keypoints[vid])
            for kid in scene.model.keypoints[vid]:
                assert np.allclose(
                    reparsed.keypoints[vid][kid],
                    scene.model.keypoints[vid][kid],
                    rtol=1e-11,
                )
        assert set(reparsed.matches) == set(scene.model.matches)
        for key in scene.model.matches:
            assert np.array_equal(
                reparsed.matches[key].indices, scene.model.matches[key].indices
            )


class TestPriors:
    def test_basic_line(self, tmp_path):
        path = _write(tmp_path, "CVDSFM-PRIOR 1\nP 7 12.5 -3.0 1.5708\n")
        priors = parse_priors(path)
        assert len(priors) == 1
        p = priors[0]
        assert (p.view_id, p.x, p.y) == (7, 12.5, -3.0)
        assert abs(p.yaw - math.pi / 2) < 1e-3
        assert p.confidence == 1.0

    def test_yaw_normalized_with_warning(self, tmp_path):
        path = _write(tmp_path, f"CVDSFM-PRIOR 1\nP 0 0 0 {3 * math.pi / 2}\n")
        with pytest.warns(FormatWarning):
            priors = parse_priors(path)
        assert abs(priors[0].yaw - (-math.pi / 2)) < 1e-12

    def test_unknown_view_rejected(self, tmp_path):
        path = _write(tmp_path, "CVDSFM-PRIOR 1\nP 5 0 0 0\n")
        with pytest.raises(ParseError, match="unknown view"):
            parse_priors(path, view_ids={0, 1})

    def test_empty_file_gives_empty_list(self, tmp_path):
        assert parse_priors(_write(tmp_path, "CVDSFM-PRIOR 1\n")) == []

    def test_duplicate_rejected(self, tmp_path):
        path = _write(tmp_path, "CVDSFM-PRIOR 1\nP 0 0 0 0\nP 0 1 1 0\n")
        with pytest.raises(ParseError, match="duplicate"):
            parse_priors(path)

    def test_round_trip(self, tmp_path):
        priors = [GeometricPrior(3, 1.25, -9.5, 0.7, 0.5), GeometricPrior(1, 0, 0, -3.0)]
        path = tmp_path / "p.txt"
        write_priors(priors, path)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            back = parse_priors(str(path))
        assert [p.view_id for p in back] == [1, 3]
        assert back[1].confidence == 0.5
        assert abs(back[1].yaw - 0.7) < 1e-11


class TestGps:
    def test_origin_maps_to_zero(self):
        out = convert_gps_to_local([(0, 40.0, -74.0, 12.0)], origin=(40.0, -74.0, 12.0))
        assert np.allclose(out[0].position, 0.0)

    def test_meridian_arc_oracle(self):
        # independent oracle: WGS84 meridian curvature radius at the equator
        a, e2 = 6378137.0, 6.69437999014e-3
        radius_m = a * (1 - e2)  # at latitude 0
        expected_y = math.radians(1e-5) * radius_m
        out = convert_gps_to_local([(0, 1e-5, 0.0, 0.0)], origin=(0.0, 0.0, 0.0))
        x, y, z = out[0].position
        assert abs(y - expected_y) < 1e-9
        assert abs(y - 1.1057) < 1e-3
        assert abs(x) < 1e-9

    def test_local_isometry_within_1km(self, rng):
        # pairwise local distances match great-circle distances to 0.1%
        lat0, lon0 = 40.74, -74.03
        records = [
            (i, lat0 + rng.uniform(-0.004, 0.004), lon0 + rng.uniform(-0.005, 0.005), 0.0)
            for i in range(8)
        ]
        out = convert_gps_to_local(records, origin=(lat0, lon0, 0.0))
        a, e2 = 6378137.0, 6.69437999014e-3
        sin0 = math.sin(math.radians(lat0))
        Rm = a * (1 - e2) / (1 - e2 * sin0**2) ** 1.5
        Rn = a / math.sqrt(1 - e2 * sin0**2)

        def geodesic_approx(r1, r2):
            dy = math.radians(r2[1] - r1[1]) * Rm
            dx = math.radians(r2[2] - r1[2]) * Rn * math.cos(math.radians(lat0))
            return math.hypot(dx, dy)

        for i in range(len(records)):
            for j in range(i + 1, len(records)):
                d_local = np.linalg.norm(out[i].position[:2] - out[j].position[:2])
                d_geo = geodesic_approx(records[i], records[j])
                if d_geo > 1.0:
                    assert abs(d_local - d_geo) / d_geo < 1e-3

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="bounds"):
            convert_gps_to_local([(0, 91.0, 0.0, 0.0)])

    def test_antipodal_warns(self):
        with pytest.warns(FormatWarning, match="distortion"):
            convert_gps_to_local(
                [(0, 10.0, 0.0, 0.0), (1, -10.0, 180.0, 0.0)], origin=(10.0, 0.0, 0.0)
            )

    def test_parse_ground_truth_mixed(self, tmp_path):
        text = "CVDSFM-GT 1\nGL 0 1 2 3\nG 1 40.0 -74.0 10.0\n"
        path = tmp_path / "gt.txt"
        path.write_text(text)
        out = parse_ground_truth(str(path), origin=(40.0, -74.0, 10.0))
        by_id = {g.view_id: g.position for g in out}
        assert np.allclose(by_id[0], [1, 2, 3])
        assert np.allclose(by_id[1], 0.0)


class TestOutputs:
    def _recon(self, n=3):
        views = {}
        rng = np.random.default_rng(7)
        rec = Reconstruction(views=views)
        for i in range(n):
            views[i] = View(i, f"v{i}", 64, 48, "ground")
            views[i].intrinsics = CameraIntrinsics(100.0 + i, (32, 24))
            rec.register(i, PoseSE3(so3_exp(rng.normal(size=3)), rng.normal(size=3)))
        rec.tracks = [
            Track(0, [(0, 0), (1, 0)], point=Point3D([1.0, 2.0, 3.0], color=(10, 20, 30)))
        ]
        return rec

    def test_empty_reconstruction(self, tmp_path):
        rec = Reconstruction(views={})
        paths = write_outputs(rec, {"coverage_total": 1.0}, tmp_path / "out")
        assert parse_poses(paths["poses"]) == []
        report = parse_report(paths["report"])
        assert report["coverage_total"] == 1.0
        assert "0" in open(paths["points"]).read()  # zero-vertex PLY header

    def test_pose_round_trip(self, tmp_path):
        rec = self._recon(5)
        paths = write_outputs(rec, {}, tmp_path / "out")
        records = parse_poses(paths["poses"])
        assert [r.view_id for r in records] == [0, 1, 2, 3, 4]
        for rec_row in records:
            view = rec.views[rec_row.view_id]
            assert np.allclose(rec_row.pose.rotation, view.pose.rotation, atol=1e-10)
            assert np.allclose(rec_row.pose.translation, view.pose.translation, atol=1e-10)
            assert abs(rec_row.focal - view.intrinsics.focal) < 1e-8

    def test_ply_vertex_count(self, tmp_path):
        rec = self._recon()
        paths = write_outputs(rec, {}, tmp_path / "out")
        content = open(paths["points"]).read()
        assert "element vertex 1" in content
        assert "10 20 30" in content

    def test_report_round_trip(self, tmp_path):
        report = {"rmse_mean_m": 0.125, "n_estimated": 7, "tag": "run1"}
        path = tmp_path / "rep.txt"
        write_report(report, path)
        back = parse_report(str(path))
        assert back == report


def test_ground_truth_round_trip(tmp_path):
    records = [GroundTruthPosition(2, np.array([1.5, -2.25, 3.0]))]
    path = tmp_path / "gt.txt"
    write_ground_truth(records, path)
    back = parse_ground_truth(str(path))
    assert back[0].view_id == 2
    assert np.allclose(back[0].position, [1.5, -2.25, 3.0])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosfm.model import (
    CameraIntrinsics,
    MatchPair,
    ModelError,
    PoseSE3,
    Point3D,
    Reconstruction,
    Track,
    View,
    build_tracks,
)


def _pair(a, b, matches):
    idx = np.array([(ka, kb) for ka, kb, _ in matches], dtype=int)
    sc = np.array([s for _, _, s in matches])
    return MatchPair(a, b, idx, sc)


class TestTypes:
    def test_intrinsics_rejects_nonpositive_focal(self):
        with pytest.raises(ModelError):
            CameraIntrinsics(0.0, (10, 10))

    def test_intrinsics_matrix(self):
        K = CameraIntrinsics(100.0, (5.0, 7.0)).matrix()
        assert np.allclose(K, [[100, 0, 5], [0, 100, 7], [0, 0, 1]])

    def test_pose_validation(self):
        PoseSE3(np.eye(3), np.zeros(3)).validate()
        with pytest.raises(ModelError):
            PoseSE3(np.eye(3) * 1.0001, np.zeros(3)).validate()
        with pytest.raises(ModelError):
            PoseSE3(-np.eye(3), np.zeros(3)).validate()  # det -1

    def test_view_rejects_bad_dims_and_class(self):
        with pytest.raises(ModelError):
            View(0, "v", 0, 10, "ground")
        with pytest.raises(ModelError):
            View(0, "v", 10, 10, "submarine")

    def test_match_pair_invariants(self):
        with pytest.raises(ModelError):
            _pair(2, 1, [(0, 0, 0.5)])  # non-canonical order
        with pytest.raises(ModelError):
            _pair(1, 2, [(0, 0, 1.5)])  # score out of range
        with pytest.raises(ModelError):
            _pair(1, 2, [(0, 0, 0.5), (0, 1, 0.5)])  # keypoint repeated on side a

    def test_point_requires_finite(self):
        with pytest.raises(ModelError):
            Point3D(np.array([np.nan, 0, 0]))

    def test_reconstruction_invariants(self):
        views = {0: View(0, "a", 10, 10, "ground"), 1: View(1, "b", 10, 10, "ground")}
        rec = Reconstruction(views=views)
        rec.register(0, PoseSE3(np.eye(3), np.zeros(3)))
        rec.tracks = [
            Track(0, [(0, 0), (1, 0)], point=Point3D(np.zeros(3)))
        ]
        with pytest.raises(ModelError):
            rec.check_invariants()  # view 1 observed but unregistered
        rec.register(1, PoseSE3(np.eye(3), np.ones(3)))
        rec.check_invariants()


class TestBuildTracks:
    def test_empty(self):
        result = build_tracks({})
        assert result.tracks == []
        assert result.dropped_components == 0

    def test_transitive_merge(self):
        matches = {
            (0, 1): _pair(0, 1, [(1, 2, 0.9)]),
            (1, 2): _pair(1, 2, [(2, 3, 0.9)]),
        }
        result = build_tracks(matches)
        assert len(result.tracks) == 1
        assert sorted(result.tracks[0].observations) == [(0, 1), (1, 2), (2, 3)]

    def test_inconsistent_component_dropped(self):
        # view 0's keypoints 1 and 5 end up in one component through view 1
        # and view 2: the component is internally contradictory and dropped
        matches = {
            (0, 1): _pair(0, 1, [(1, 2, 0.9)]),
            (0, 2): _pair(0, 2, [(5, 3, 0.9)]),
            (1, 2): _pair(1, 2, [(2, 3, 0.9)]),
        }
        result = build_tracks(matches)
        assert result.tracks == []
        assert result.dropped_components == 1
        assert result.dropped_observations == 4  # {0.1, 0.5, 1.2, 2.3}

    def test_ids_are_dense_and_unique(self):
        matches = {
            (0, 1): _pair(0, 1, [(0, 0, 1.0), (1, 1, 1.0)]),
            (2, 3): _pair(2, 3, [(9, 9, 1.0)]),
        }
        tracks = build_tracks(matches).tracks
        assert sorted(t.track_id for t in tracks) == list(range(len(tracks)))


@st.composite
def match_graphs(draw):
    n_views = draw(st.integers(3, 6))
    n_kp = draw(st.integers(1, 5))
    edges = draw(
        st.lists(
            st.tuples(
                st.integers(0, n_views - 1),
                st.integers(0, n_views - 1),
                st.integers(0, n_kp - 1),
                st.integers(0, n_kp - 1),
            ),
            max_size=25,
        )
    )
    pairs = {}
    for a, b, ka, kb in edges:
        if a == b:
            continue
        if a > b:
            a, b, ka, kb = b, a, kb, ka
        entry = pairs.setdefault((a, b), {})
        # keep one match per keypoint per side (pair invariant)
        if ka in {k for k, _ in entry.items()} or kb in set(entry.values()):
            continue
        entry[ka] = kb
    return {
        key: _pair(key[0], key[1], [(ka, kb, 1.0) for ka, kb in sorted(val.items())])
        for key, val in pairs.items()
        if val
    }


@given(match_graphs(), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_track_building_order_independent(matches, shuffler):
    baseline = build_tracks(matches)
    keys = list(matches)
    shuffler.shuffle(keys)
    shuffled = build_tracks({k: matches[k] for k in keys})
    as_sets = lambda res: {frozenset(t.observations) for t in res.tracks}
    assert as_sets(baseline) == as_sets(shuffled)
    assert baseline.dropped_components == shuffled.dropped_components


@given(match_graphs())
@settings(max_examples=60, deadline=None)
def test_observation_conservation(matches):
    result = build_tracks(matches)
    keypoints = set()
    for (a, b), pair in matches.items():
        for ka, kb in pair.indices:
            keypoints.add((a, int(ka)))
            keypoints.add((b, int(kb)))
    kept = sum(len(t.observations) for t in result.tracks)
    assert kept + result.dropped_observations == len(keypoints)

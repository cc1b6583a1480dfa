import numpy as np
import pytest

from geosfm.ba import project_point
from geosfm.geometry import look_rotation, so3_exp
from geosfm.model import CameraIntrinsics, PoseSE3


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_pose(rng, spread=3.0):
    center = rng.normal(size=3) * spread
    forward = rng.normal(size=3)
    if abs(forward[2]) / np.linalg.norm(forward) > 0.9:
        forward[2] *= 0.1
    return PoseSE3(look_rotation(forward), center)


def random_pose_free(rng):
    """Pose with a fully random rotation (not level-constrained)."""
    return PoseSE3(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 3.0)


def points_in_front(pose, rng, n, depth=(4.0, 9.0), lateral=2.0):
    """World points inside the camera's forward frustum."""
    local = np.column_stack(
        [
            rng.uniform(-lateral, lateral, n),
            rng.uniform(-lateral, lateral, n),
            rng.uniform(depth[0], depth[1], n),
        ]
    )
    return pose.translation + local @ pose.rotation.T


def project_points(intr: CameraIntrinsics, pose: PoseSE3, points):
    return np.stack([project_point(intr, pose, X)[0] for X in points])

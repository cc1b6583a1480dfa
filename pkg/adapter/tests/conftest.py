import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from toyscene import write_scene


@pytest.fixture(scope="session")
def toy_scene(tmp_path_factory):
    directory = tmp_path_factory.mktemp("toy_images")
    cameras = write_scene(directory, n_cameras=5, seed=0)
    return str(directory), cameras

import numpy as np
import pytest

from voxnav.geometry import CameraIntrinsics


@pytest.fixture(scope="session")
def small_intrinsics():
    """Low-res wide-angle camera; keeps render-heavy tests fast."""
    return CameraIntrinsics(focal=30.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)

import numpy as np
import pytest

from boxlift import Box3D, Dimensions, PinholeCamera

DATA = __import__("pathlib").Path(__file__).parent / "data"


@pytest.fixture
def pin_cam() -> PinholeCamera:
    """Wide pinhole camera used throughout the synthetic tests."""
    return PinholeCamera.from_fov(np.radians(81.0), 621, 188)


@pytest.fixture
def kitti_cam() -> PinholeCamera:
    return PinholeCamera(
        fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, width=1242, height=375
    )


@pytest.fixture
def car_box() -> Box3D:
    return Box3D(0.5, 0.8, 15.0, Dimensions(1.6, 1.7, 3.9), 0.4)


def make_box(x=0.0, y=0.8, z=15.0, h=1.6, w=1.7, l=3.9, ry=0.0) -> Box3D:
    return Box3D(x, y, z, Dimensions(h, w, l), ry)

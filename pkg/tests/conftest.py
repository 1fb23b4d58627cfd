
import pytest

from crossview_lm import (CameraModel, SatelliteFrame, default_extractor,
                          extract_pyramid, make_scene, render_ground_view)


def build_pyramids(scene, levels=(1, 2, 3)):
    """Ground and satellite feature pyramids of a synthetic scene."""
    render = render_ground_view(scene)
    ground = extract_pyramid(render.image, default_extractor(),
                             camera=scene.camera, levels=levels)
    satellite = extract_pyramid(scene.satellite, default_extractor(),
                                frame=scene.frame, levels=levels)
    return ground, satellite


@pytest.fixture(scope="session")
def example_camera():
    """Small camera with round numbers so projections are hand-checkable."""
    return CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, height=2.0,
                       width=200, height_px=160)


@pytest.fixture(scope="session")
def example_frame():
    return SatelliteFrame(alpha=0.2, u0=256.0, v0=256.0, width=512, height=512)


@pytest.fixture(scope="session")
def default_scene():
    return make_scene(42)


@pytest.fixture(scope="session")
def default_scene_pyramids(default_scene):
    return build_pyramids(default_scene)

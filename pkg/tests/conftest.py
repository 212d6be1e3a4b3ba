"""Shared meshes and helpers for the test suite."""

import logging

import numpy as np
import pytest

from aorta_twin.geometry import Mesh, build_vessel_mesh
from aorta_twin.models import VesselShape


@pytest.fixture(autouse=True)
def restore_root_logging():
    """setup_logging installs root handlers; put the original set back after each test."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture(scope="session")
def vessel_shape() -> VesselShape:
    return VesselShape()


@pytest.fixture(scope="session")
def channel_shape() -> VesselShape:
    """Straight 4 cm x 8 mm channel without a divider."""
    return VesselShape(
        total_length=0.04, total_height=0.008, trunk_length=0.04, splitter_length=0.0, splitter_thickness=0.0
    )


@pytest.fixture(scope="session")
def coarse_mesh(vessel_shape) -> Mesh:
    return build_vessel_mesh(vessel_shape, 72, 8)


@pytest.fixture(scope="session")
def fine_mesh(vessel_shape) -> Mesh:
    return build_vessel_mesh(vessel_shape, 288, 32)


@pytest.fixture(scope="session")
def small_mesh(vessel_shape) -> Mesh:
    """16 x 8 divided vessel: 108 fluid cells."""
    return build_vessel_mesh(vessel_shape, 16, 8)


@pytest.fixture(scope="session")
def small_fine_mesh(vessel_shape) -> Mesh:
    return build_vessel_mesh(vessel_shape, 32, 16)


@pytest.fixture(scope="session")
def channel_mesh(channel_shape) -> Mesh:
    return build_vessel_mesh(channel_shape, 40, 16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

import numpy as np
import pytest

from hypothesis import HealthCheck, settings

from orthoplanes.generic import so3_exp
from orthoplanes.scene_io import Layout, SyntheticSpec, generate_synthetic_scene

settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_rotation(rng):
    return so3_exp(rng.normal(size=3))


@pytest.fixture(scope="session")
def corner_room():
    """Noise-free room corner with exact normals."""
    return generate_synthetic_scene(SyntheticSpec(
        Layout.CORNER_ROOM, points_per_m2=2500, seed=1,
        recompute_normals=False, flip_normals=False))


@pytest.fixture(scope="session")
def noisy_box():
    return generate_synthetic_scene(SyntheticSpec(
        Layout.BOX, points_per_m2=2500, noise_sigma=0.003, seed=2))

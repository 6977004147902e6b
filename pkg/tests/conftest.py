import numpy as np
import pytest

from csou.scene import SceneConfig


@pytest.fixture(scope="session")
def scene_cfg():
    """Default 11x11 patch, c=3, sigma 0.75."""
    return SceneConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

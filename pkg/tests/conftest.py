import numpy as np
import pytest

from sparseped.synthdata import SceneParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    return SceneParams(width=48, height=36, min_h=8, max_h=20, n_pedestrians=(1, 3))

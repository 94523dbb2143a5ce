import numpy as np
import pytest

from fusereg.evaluation import synthetic_texture
from fusereg.grid import GridGeometry, ScalarImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def geom16():
    return GridGeometry(16, 16, 1.0, 1.0, 0.0, 0.0)


@pytest.fixture
def geom_small():
    return GridGeometry(24, 20, 1.0, 1.0, 0.0, 0.0)


@pytest.fixture
def texture64():
    return synthetic_texture(GridGeometry(64, 64, 1.0, 1.0, 0.0, 0.0), seed=5, smoothness=2.0)


def random_image(geometry, rng, lo=0.0, hi=1.0):
    vals = rng.uniform(lo, hi, geometry.shape)
    return ScalarImage(geometry, vals)

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def interior_image(rng, size=8, lo=0.1, hi=0.9):
    """Random image kept away from the clamp boundaries."""
    return rng.uniform(lo, hi, (size, size, 3))

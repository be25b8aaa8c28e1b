import numpy as np
import pytest

from fidmark.geom import Pose, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return so3_exp(axis * angle)


def random_pose(rng, max_angle=np.pi, span=5.0):
    return Pose(random_rotation(rng, max_angle), rng.uniform(-span, span, size=3))

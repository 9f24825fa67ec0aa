import numpy as np
import pytest

from evblur import K
from evblur.poses import Pose


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, width=64, height=64, spread=8.0, margin=10.0, score=None):
    c = rng.uniform([margin, margin], [width - margin, height - margin])
    kp = np.clip(c + rng.normal(0, spread, (K, 2)), 1, [width - 2, height - 2])
    return Pose(c, kp, score=rng.uniform(0.05, 1.0) if score is None else score)

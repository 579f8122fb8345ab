import numpy as np
import pytest

from metamorph.rigidbody import Pose
from metamorph.spring_energy import Spring


def random_axis_angle(rng, magnitude=None):
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    if magnitude is None:
        magnitude = rng.uniform(0.0, 3.0)
    return magnitude * v


def random_pose(rng, magnitude=None):
    return Pose(rng.normal(scale=50.0, size=3), random_axis_angle(rng, magnitude))


def random_spring(rng, l=None):
    u1 = rng.normal(scale=20.0, size=3)
    u2 = rng.normal(scale=20.0, size=3)
    k = rng.uniform(0.5, 5.0)
    l = rng.uniform(5.0, 80.0) if l is None else l
    return Spring(0, 0, 1, u1, u2, k, l, l)


def central_diff(fun, x, step):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

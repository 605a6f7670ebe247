import numpy as np
import pytest

from alqr import validate_dataset
from alqr._rng import make_rng


def linear_dataset(n=200, seed=0, binary=False, p=2, beta=1.0):
    """y = beta a + L1 + noise, with a confounded by L1."""
    rng = make_rng(seed)
    l = rng.normal(size=(n, p))
    if binary:
        a = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-l[:, 0]))).astype(float)
        kind = "binary"
    else:
        a = l[:, 0] + rng.normal(size=n)
        kind = "continuous"
    y = beta * a + l[:, 0] + rng.normal(size=n)
    return validate_dataset(y, a, l, kind)


@pytest.fixture
def cont_data():
    return linear_dataset(200, seed=1)


@pytest.fixture
def bin_data():
    return linear_dataset(200, seed=2, binary=True)

import numpy as np
import pytest

from embshift.formats import PairDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n, d, l, meta=None):
    neutral = rng.standard_normal((n, d, l)).astype(np.float32)
    biased = (neutral + rng.standard_normal((n, d, l))).astype(np.float32)
    return PairDataset(neutral, biased, meta or {})


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, 5, 4, 3, {"bias_label": "test"})

import numpy as np
import pytest

from seqint.data import Dataset


def rct_data(seed, n=80, p=4, beta=None, q=0.5, noise=1.0, names=None):
    """Randomized-trial data with a known constant propensity."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    a = (rng.random(n) < q).astype(float)
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = 1.0 + 0.5 * x[:, 0] + a * (0.5 + x @ beta) + noise * rng.standard_normal(n)
    return Dataset(y, a, x, np.full(n, q), names or ())


@pytest.fixture
def make_rct():
    return rct_data

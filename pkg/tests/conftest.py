import numpy as np
import pytest

from gmmdiffusion.mixture import make_mixture
from gmmdiffusion.rng import make_rng


def random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_cov(rng, d, lo=0.5, hi=2.0):
    U = random_rotation(rng, d)
    return (U * rng.uniform(lo, hi, d)) @ U.T


def random_mixture(rng, d, k, mean_scale=2.0, lo=0.5, hi=2.0):
    means = rng.normal(scale=mean_scale, size=(k, d))
    covs = np.stack([random_cov(rng, d, lo, hi) for _ in range(k)])
    w = rng.uniform(0.2, 1.0, k)
    w /= w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return make_mixture(means, covs, w)


def central_gradient(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return make_rng(12345, "tests")

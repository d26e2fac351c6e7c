import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from gmmdiffusion.mixture import (ConditioningError, ConditioningParams, GaussianComponent,
                                  GaussianMixture, exact_score, forward_sample, log_density,
                                  make_mixture, noised_mixture, parameter_distance,
                                  posterior_weights, restrict, sample_mixture)
from gmmdiffusion.rng import make_rng

from conftest import central_gradient, random_mixture


def pair_1d(a=3.0, w=(0.5, 0.5)):
    return make_mixture(np.array([[-a], [a]]), np.array([[[1.0]], [[1.0]]]), np.array(w))


class TestValidation:
    def test_negative_eigenvalue_named(self):
        with pytest.raises(ConditioningError, match="eigenvalue"):
            GaussianComponent([0.0, 0.0], [[1.0, 0.0], [0.0, -2.0]])

    def test_eigenvalue_outside_bounds(self):
        with pytest.raises(ConditioningError, match="beta"):
            make_mixture(np.zeros((1, 2)), np.array([np.diag([1.0, 5.0])]), [1.0], beta=2.0)

    def test_radius(self):
        with pytest.raises(ConditioningError, match="R"):
            make_mixture(np.array([[5.0, 0.0]]), np.array([np.eye(2)]), [1.0], R=2.0)

    def test_weights(self):
        with pytest.raises(ConditioningError):
            make_mixture(np.zeros((2, 1)), np.ones((2, 1, 1)), [0.5, 0.6])
        with pytest.raises(ConditioningError):
            make_mixture(np.zeros((2, 1)), np.ones((2, 1, 1)), [1.0, 0.0])

    def test_conditioning_params(self):
        with pytest.raises(ConditioningError):
            ConditioningParams(alpha=1.5, beta=2.0, radius_R=1.0)
        with pytest.raises(ConditioningError):
            ConditioningParams(alpha=0.5, beta=0.5, radius_R=1.0)
        cp = ConditioningParams(alpha=0.5, beta=2.0, radius_R=math.e)
        assert cp.tau == pytest.approx(4.0)


class TestSampling:
    def test_zero_mean(self):
        mix = make_mixture(np.zeros((1, 3)), np.array([np.eye(3)]), [1.0])
        X = sample_mixture(mix, 100_000, make_rng(1)).points
        assert np.all(np.abs(X.mean(axis=0)) <= 3 * math.sqrt(3 / 100_000))

    def test_label_frequency(self):
        mix = make_mixture(np.array([[-1.0], [1.0]]), np.ones((2, 1, 1)), [0.3, 0.7])
        s = sample_mixture(mix, 100_000, make_rng(2))
        assert abs(np.mean(s.labels == 0) - 0.3) <= 0.01

    def test_histogram_against_quadrature(self):
        mix = pair_1d(3.0)
        n = 1_000_000
        X = sample_mixture(mix, n, make_rng(3)).points[:, 0]
        edges = np.linspace(-6, 6, 61)
        counts, _ = np.histogram(X, edges)
        dens = lambda x: math.exp(log_density(mix, np.array([x])))
        for i in range(60):
            p, _ = integrate.quad(dens, edges[i], edges[i + 1], epsabs=0, epsrel=1e-10)
            se = math.sqrt(p * (1 - p) / n)
            assert abs(counts[i] / n - p) <= 4 * se, i

    def test_deterministic(self):
        mix = pair_1d()
        a = sample_mixture(mix, 50, make_rng(9, "x"))
        b = sample_mixture(mix, 50, make_rng(9, "x"))
        assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)


class TestDensity:
    def test_standard_normal_at_zero(self):
        for d in (1, 3, 5):
            mix = make_mixture(np.zeros((1, d)), np.array([np.eye(d)]), [1.0])
            assert log_density(mix, np.zeros(d)) == pytest.approx(-d / 2 * math.log(2 * math.pi), abs=1e-14)

    def test_pair_at_zero(self):
        val = log_density(pair_1d(3.0), np.array([0.0]))
        assert abs(val - math.log(math.exp(-4.5) / math.sqrt(2 * math.pi))) <= 1e-10

    def test_permutation_invariance(self, rng):
        mix = random_mixture(rng, 3, 3)
        perm = [2, 0, 1]
        other = make_mixture(mix.means[perm], mix.covariances[perm], mix.weights[perm])
        X = rng.normal(size=(20, 3))
        assert np.allclose(log_density(mix, X), log_density(other, X), atol=1e-12, rtol=0)

    def test_against_scipy(self, rng):
        mix = random_mixture(rng, 3, 2)
        X = rng.normal(size=(10, 3))
        ref = np.log(sum(w * stats.multivariate_normal(c.mean, c.covariance).pdf(X)
                         for w, c in zip(mix.weights, mix.components)))
        assert np.allclose(log_density(mix, X), ref, rtol=1e-12)

    def test_far_separated_no_underflow(self):
        mix = pair_1d(40.0)
        w = posterior_weights(mix, np.array([40.0]))
        assert np.all(np.isfinite(w)) and w[1] == 1.0


class TestScore:
    def test_single_component(self, rng):
        Q = np.array([[2.0, 0.3], [0.3, 1.0]])
        mu = np.array([1.0, -1.0])
        mix = make_mixture(mu[None], Q[None], [1.0])
        X = rng.normal(size=(30, 2))
        assert np.allclose(exact_score(mix, X), -(X - mu) @ np.linalg.inv(Q).T, atol=1e-12)

    def test_symmetric_zero(self):
        assert abs(exact_score(pair_1d(2.5), np.array([0.0]))[0]) <= 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference(self, seed):
        r = make_rng(seed, "fd")
        mix = random_mixture(r, 3, 3)
        for _ in range(20):
            x = r.normal(scale=2.0, size=3)
            fd = central_gradient(lambda y: log_density(mix, y), x)
            s = exact_score(mix, x)
            assert np.linalg.norm(s - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)

    def test_stationary_limit(self, rng):
        mix = random_mixture(rng, 2, 3, mean_scale=1.0)
        assert mix.conditioning.radius_R <= 5
        q = noised_mixture(mix, 20.0)
        X = rng.normal(size=(50, 2))
        X *= np.minimum(1.0, 3.0 / np.linalg.norm(X, axis=1))[:, None]
        assert np.max(np.linalg.norm(exact_score(q, X) + X, axis=1)) <= 1e-6


class TestNoising:
    def test_identity_at_zero(self, rng):
        mix = random_mixture(rng, 2, 2)
        assert noised_mixture(mix, 0.0) is mix

    def test_diag_example(self):
        mix = make_mixture(np.zeros((1, 2)), np.array([np.diag([2.0, 0.5])]), [1.0])
        q = noised_mixture(mix, math.log(2))
        assert np.allclose(q.covariances[0], np.diag([1.25, 0.875]), atol=1e-15)

    def test_contraction(self, rng):
        mix = random_mixture(rng, 3, 2, mean_scale=1.5)
        R = mix.conditioning.radius_R
        assert R <= 10
        q = noised_mixture(mix, 50.0)
        assert np.all(np.linalg.norm(q.means, axis=1) <= 10 * math.exp(-50))
        for Q in q.covariances:
            assert np.linalg.norm(Q - np.eye(3)) <= R * math.exp(-100) + 1e-15

    def test_stationary_covariance(self, rng):
        mix = random_mixture(rng, 2, 2)
        _, xt, _ = forward_sample(mix, 1e6, 100_000, make_rng(4))
        assert np.linalg.norm(np.cov(xt.T) - np.eye(2)) <= 0.02 * math.sqrt(2)

    def test_forward_deterministic(self, rng):
        mix = random_mixture(rng, 2, 2)
        a = forward_sample(mix, 0.3, 100, make_rng(5))
        b = forward_sample(mix, 0.3, 100, make_rng(5))
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_forward_moments_match_noised(self):
        mix = make_mixture(np.array([[2.0, 0.0], [-1.0, 1.0]]),
                           np.array([np.diag([1.5, 0.7]), np.eye(2)]), [0.4, 0.6])
        t, n = 0.5, 100_000
        _, xt, _ = forward_sample(mix, t, n, make_rng(6))
        q = noised_mixture(mix, t)
        mean = q.weights @ q.means
        second = sum(w * (Q + np.outer(m, m)) for w, m, Q in zip(q.weights, q.means, q.covariances))
        cov = second - np.outer(mean, mean)
        se_mean = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(xt.mean(axis=0) - mean) <= 4 * se_mean)
        # second moments: SE from the sample variance of the products
        for a in range(2):
            for b in range(2):
                prod = xt[:, a] * xt[:, b]
                assert abs(prod.mean() - second[a, b]) <= 4 * prod.std() / math.sqrt(n)

    def test_second_moment_identity(self, rng):
        mix = random_mixture(rng, 2, 2)
        t, n = 0.7, 200_000
        x0, xt, _ = forward_sample(mix, t, n, make_rng(7))
        M0 = sum(w * (Q + np.outer(m, m)) for w, m, Q in zip(mix.weights, mix.means, mix.covariances))
        target = math.exp(-2 * t) * M0 + (1 - math.exp(-2 * t)) * np.eye(2)
        for a in range(2):
            for b in range(2):
                prod = xt[:, a] * xt[:, b]
                assert abs(prod.mean() - target[a, b]) <= 4 * prod.std() / math.sqrt(n)

    def test_rejects_nonpositive_t(self):
        with pytest.raises(ValueError):
            forward_sample(pair_1d(), 0.0, 10, make_rng(0))


class TestDistanceRestrict:
    def test_distance_example(self):
        a = GaussianComponent([0.0], [[1.0]])
        b = GaussianComponent([3.0], [[2.0]])
        assert parameter_distance(a, b) == 4.0
        assert parameter_distance(b, a) == parameter_distance(a, b)
        assert parameter_distance(a, a) == 0.0

    def test_restrict(self):
        mix = make_mixture(np.array([[0.0], [1.0], [2.0]]), np.ones((3, 1, 1)), [0.2, 0.3, 0.5])
        sub = restrict(mix, [0, 2])
        assert np.allclose(sub.weights, [2 / 7, 5 / 7], atol=1e-15)
        assert np.array_equal(restrict(mix, [1]).weights, [1.0])
        full = restrict(mix, [0, 1, 2])
        assert np.array_equal(full.weights, mix.weights) and np.array_equal(full.means, mix.means)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 4), k=st.integers(1, 3),
       t=st.sampled_from([0.0, 0.1, 1.0]))
def test_posterior_weights_are_a_distribution(seed, d, k, t):
    r = make_rng(seed)
    mix = noised_mixture(random_mixture(r, d, k), t)
    W = posterior_weights(mix, r.normal(scale=3, size=(16, d)))
    assert np.all(W >= 0) and np.allclose(W.sum(axis=1), 1.0, atol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gmmdiffusion.clustering import (ClusteringFunction, PartitionPair, Refinement,
                                     build_clustering, clamp_inverse, classify, classify_batch,
                                     cluster_cov, cluster_cov_batch, cluster_mean,
                                     enumerate_partition_pairs, midpoint_thresholds,
                                     oracle_thresholds, restricted_growth_strings,
                                     threshold_grid)
from gmmdiffusion.evaluation import clustering_accuracy
from gmmdiffusion.mixture import make_mixture, sample_mixture
from gmmdiffusion.rng import make_rng

from conftest import random_cov


def bell(n):
    # Bell numbers via the Bell triangle
    row = [1]
    for _ in range(n - 1):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[-1]


class TestClamp:
    def test_identity(self):
        assert np.allclose(clamp_inverse(np.eye(3), 1.0), np.eye(3), atol=1e-15)

    def test_lift(self):
        assert np.allclose(clamp_inverse(np.diag([0.1, 3.0]), 1.0), np.diag([2.0, 1 / 3]), atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_perturbation_bound(self, seed):
        r = make_rng(seed, "clamp")
        alpha, beta, d = 0.5, 2.0, 5
        Q = random_cov(r, d, alpha, beta)
        G = r.normal(size=(d, d))
        E = G + G.T
        v = 0.2
        E *= v / np.linalg.norm(E)
        K = clamp_inverse(Q + E, alpha)
        assert np.linalg.norm(K - np.linalg.inv(Q)) <= 4 * v / alpha ** 2
        assert np.linalg.norm(K, 2) <= 2 / alpha + 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.05, 1.0))
    def test_operator_bound(self, seed, alpha):
        r = make_rng(seed)
        G = r.normal(size=(4, 4))
        K = clamp_inverse(G + G.T, alpha)
        assert np.linalg.norm(K, 2) <= 2 / alpha * (1 + 1e-12)


class TestPartitions:
    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    def test_counts(self, k):
        pairs = list(enumerate_partition_pairs(k))
        assert len(pairs) == bell(k) ** 2
        assert len(set(pairs)) == len(pairs)

    def test_known_counts(self):
        assert len(list(enumerate_partition_pairs(1))) == 1
        assert len(list(enumerate_partition_pairs(3))) == 25
        assert len(list(enumerate_partition_pairs(4))) == 225

    def test_rgs_lexicographic(self):
        strings = list(restricted_growth_strings(4))
        assert strings == sorted(strings) and strings[0] == (0, 0, 0, 0) and strings[-1] == (0, 1, 2, 3)

    def test_guard(self):
        with pytest.raises(ValueError):
            list(enumerate_partition_pairs(6))
        with pytest.raises(ValueError):
            list(enumerate_partition_pairs(0))

    def test_invalid_pair(self):
        with pytest.raises(ValueError):
            PartitionPair(((0,), (2,)), ((0, 1),))

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_refinement_partitions_k(self, k):
        for pair in enumerate_partition_pairs(k):
            ref = Refinement.of(pair)
            flat = sorted(i for U in ref.pieces for i in U)
            assert flat == list(range(k))
            for (a, b), p in ref.lookup.items():
                inter = set(pair.mean_partition[a]) & set(pair.cov_partition[b])
                assert (p is None) == (not inter)
                if p is not None:
                    assert set(ref.pieces[p]) == inter


def two_cov_instance(d=4):
    return make_mixture(np.zeros((2, d)), np.stack([np.eye(d), 4 * np.eye(d)]), [0.5, 0.5])


class TestClusterFunctions:
    def test_k1(self, rng):
        cf = build_clustering(PartitionPair.trivial(1), np.zeros((1, 2)), np.eye(2)[None], 1.0)
        for x in rng.normal(size=(10, 2)):
            assert cluster_mean(x, cf)[0] == 0
            assert cluster_cov(x, cf) == 1
            assert classify(x, cf) == 0

    def test_exact_mean_hit(self):
        means = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        pair = PartitionPair(((0, 2), (1,)), ((0, 1, 2),))
        cf = build_clustering(pair, means, np.stack([np.eye(2)] * 3), 1.0)
        assert [cluster_mean(m, cf)[0] for m in means] == [0, 1, 0]

    def test_separated_means(self):
        mu = np.array([[10.0, 0.0, 0.0], [-10.0, 0.0, 0.0]])
        mix = make_mixture(mu, np.stack([np.eye(3)] * 2), [0.5, 0.5])
        pair = PartitionPair(((0,), (1,)), ((0, 1),))
        cf = build_clustering(pair, mu, mix.covariances, 1.0)
        X = mu[0] + make_rng(1).normal(size=(10_000, 3))
        a = np.array([cluster_mean(x, cf)[0] for x in X[:2000]])
        assert np.mean(a != 0) <= 0.001

    def test_minus_infinity_thresholds(self, rng):
        mix = two_cov_instance()
        pair = PartitionPair(((0, 1),), ((0,), (1,)))
        t = np.full((2, 2), -np.inf)
        cf = build_clustering(pair, mix.means, mix.covariances, 1.0, t)
        X = rng.normal(size=(200, 4)) * 2
        assert np.all(cluster_cov_batch(X, cf) == 0)
        assert np.all(classify_batch(X, cf) == 0)

    def test_deterministic(self, rng):
        mix = two_cov_instance()
        pair = PartitionPair(((0, 1),), ((0,), (1,)))
        cf = build_clustering(pair, mix.means, mix.covariances, 1.0,
                              midpoint_thresholds(mix.covariances, np.linalg.inv(mix.covariances)))
        X = rng.normal(size=(500, 4)) * 1.5
        assert np.array_equal(classify_batch(X, cf), classify_batch(X, cf))
        assert [classify(x, cf) for x in X[:20]] == list(classify_batch(X[:20], cf))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
    def test_rescaling_invariance(self, seed, scale):
        r = make_rng(seed)
        mix = two_cov_instance(3)
        pair = PartitionPair(((0, 1),), ((0,), (1,)))
        cf = build_clustering(pair, mix.means, mix.covariances, 1.0,
                              midpoint_thresholds(mix.covariances, np.linalg.inv(mix.covariances)))
        scaled = ClusteringFunction(cf.pair, cf.refinement, cf.means, cf.covariances,
                                    cf.inverses * scale, cf.thresholds * scale, cf.eta * scale,
                                    cf.mean_subspace)
        # powers of two keep both sides exactly representable
        p2 = 2.0 ** round(math.log2(scale))
        scaled2 = ClusteringFunction(cf.pair, cf.refinement, cf.means, cf.covariances,
                                     cf.inverses * p2, cf.thresholds * p2, cf.eta * p2,
                                     cf.mean_subspace)
        X = r.normal(size=(64, 3)) * 2
        assert np.array_equal(cluster_cov_batch(X, cf), cluster_cov_batch(X, scaled2))
        agree = np.mean(cluster_cov_batch(X, cf) == cluster_cov_batch(X, scaled))
        assert agree >= 0.95


class TestThresholds:
    def test_oracle_formula(self):
        mix = two_cov_instance()
        K = np.linalg.inv(mix.covariances)
        t = oracle_thresholds(mix.covariances, K)
        # with exact inverses t_ij collapses to <Q_j, K_i - K_j>
        assert t[0, 1] == pytest.approx(np.sum(mix.covariances[1] * (K[0] - K[1])))
        assert t[0, 0] == 0 and t[1, 1] == 0

    def test_grid_cap3(self):
        g = threshold_grid(2.0, 0.5, 3, 0.01, 3)
        assert g.shape == (3,) and np.allclose(g, -g[::-1]) and 0.0 in g

    @settings(max_examples=50, deadline=None)
    @given(beta=st.floats(1, 5), alpha=st.floats(0.1, 1), d=st.integers(1, 6),
           eta=st.floats(0.01, 5), cap=st.integers(1, 400))
    def test_grid_spacing(self, beta, alpha, d, eta, cap):
        g = threshold_grid(beta, alpha, d, eta, cap)
        assert 1 <= g.shape[0] <= cap
        if g.shape[0] > 1:
            assert np.max(np.diff(g)) <= eta * (1 + 1e-12)
        assert np.allclose(g, -g[::-1], atol=1e-12 * max(1, abs(g).max()))

    def test_grid_covers_oracle(self):
        mix = two_cov_instance()
        cf = build_clustering(PartitionPair(((0, 1),), ((0,), (1,))), mix.means, mix.covariances,
                              1.0, beta=4.0)
        t = oracle_thresholds(mix.covariances, cf.inverses)
        L = 2 * 4.0 * 4 / 1.0
        cap = int(math.ceil(2 * L / cf.eta)) + 1
        g = threshold_grid(4.0, 1.0, 4, cf.eta, cap)
        for v in (t[0, 1], t[1, 0]):
            assert abs(v) <= L
            assert np.min(np.abs(g - v)) <= cf.eta


def test_cov_group_midpoint_rate():
    """Midpoint thresholds: group-2 rate equals the chi-square oracle probability."""
    mix = two_cov_instance()
    pair = PartitionPair(((0, 1),), ((0,), (1,)))
    cf0 = build_clustering(pair, mix.means, mix.covariances, 1.0, beta=4.0)
    t = midpoint_thresholds(mix.covariances, cf0.inverses)
    cf = build_clustering(pair, mix.means, mix.covariances, 1.0, t, cf0.eta)
    X = 2.0 * make_rng(2).normal(size=(10_000, 4))
    rate = np.mean(cluster_cov_batch(X, cf) == 2)
    # under N(0, 4I) the statistic is 3 chi2_4; group 1 fires below t_12 - eta
    p = 1 - stats.chi2.cdf((t[0, 1] - cf.eta) / 3.0, df=4)
    assert abs(rate - p) <= 4 * math.sqrt(p * (1 - p) / 10_000)


@pytest.mark.xfail(strict=True, reason="zero-slack oracle thresholds sit at the mean of the "
                   "competing statistic, so about half of N2 passes the group-1 test")
def test_cov_group_oracle_rate():
    mix = two_cov_instance()
    pair = PartitionPair(((0, 1),), ((0,), (1,)))
    cf0 = build_clustering(pair, mix.means, mix.covariances, 1.0, beta=4.0)
    t = oracle_thresholds(mix.covariances, cf0.inverses)
    cf = build_clustering(pair, mix.means, mix.covariances, 1.0, t, cf0.eta)
    X = 2.0 * make_rng(3).normal(size=(10_000, 4))
    assert np.mean(cluster_cov_batch(X, cf) == 2) >= 0.99


def test_misclassification_decreases_with_cov_gap():
    d = 3
    totals = []
    for gap in (4.0, 8.0, 16.0):
        c = 1 + gap / math.sqrt(d)
        mix = make_mixture(np.zeros((2, d)), np.stack([np.eye(d), c * np.eye(d)]), [0.5, 0.5])
        rep = clustering_accuracy(mix, PartitionPair(((0, 1),), ((0,), (1,))), 20_000,
                                  make_rng(4), "oracle")
        totals.append(float(np.mean(rep.extras["rates"])))
    assert totals[0] > totals[1] > totals[2]

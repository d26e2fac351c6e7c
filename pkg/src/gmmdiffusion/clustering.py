"""Deterministic clustering by nearest projected mean and likelihood-ratio tests.

A point is first assigned to a mean group by its nearest mean estimate inside
the span of the estimates, then to a covariance group by comparing quadratic
forms (x - mu(x))^T (K_i - K_j) (x - mu(x)) against per-pair thresholds. The
piece of the common refinement indexed by the two groups is the cluster.

Conventions: mean groups ``a`` are 0-based; covariance groups ``b`` are
1-based with 0 meaning "no group qualified"; pieces are 0-based and piece 0
is the fallback whenever the two groups do not intersect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .spectral import SubspaceBasis, nearest_centers, span_basis

MAX_PARTITION_K = 5


def clamp_inverse(Qhat: np.ndarray, alpha: float) -> np.ndarray:
    """Invert Qhat after lifting every eigenvalue below alpha/2 to alpha/2."""
    Q = np.atleast_2d(np.asarray(Qhat, dtype=float))
    Q = 0.5 * (Q + Q.T)
    vals, vecs = np.linalg.eigh(Q)
    vals = np.maximum(vals, alpha / 2.0)
    K = (vecs / vals) @ vecs.T
    return 0.5 * (K + K.T)


def restricted_growth_strings(k: int) -> Iterator[tuple[int, ...]]:
    """All restricted growth strings of length k in lexicographic order."""
    if k == 0:
        yield ()
        return
    a = [0] * k
    while True:
        yield tuple(a)
        # rightmost position that can be incremented
        i = k - 1
        while i > 0 and a[i] > max(a[:i]):
            i -= 1
        if i == 0:
            return
        a[i] += 1
        for j in range(i + 1, k):
            a[j] = 0


def rgs_to_partition(rgs: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    blocks: dict[int, list[int]] = {}
    for i, b in enumerate(rgs):
        blocks.setdefault(b, []).append(i)
    return tuple(tuple(blocks[b]) for b in sorted(blocks))


def set_partitions(k: int) -> list[tuple[tuple[int, ...], ...]]:
    return [rgs_to_partition(r) for r in restricted_growth_strings(k)]


@dataclass(frozen=True)
class PartitionPair:
    mean_partition: tuple[tuple[int, ...], ...]
    cov_partition: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for P in (self.mean_partition, self.cov_partition):
            flat = sorted(i for block in P for i in block)
            if flat != list(range(len(flat))) or any(len(b) == 0 for b in P):
                raise ValueError(f"{P} is not a set partition of [k]")
        if (sum(len(b) for b in self.mean_partition)
                != sum(len(b) for b in self.cov_partition)):
            raise ValueError("the two partitions cover different index sets")

    @property
    def k(self) -> int:
        return sum(len(b) for b in self.mean_partition)

    @classmethod
    def trivial(cls, k: int) -> "PartitionPair":
        one = (tuple(range(k)),)
        return cls(one, one)


def enumerate_partition_pairs(k: int) -> Iterator[PartitionPair]:
    """Every (S, T) pair of set partitions of [k], S-major, each in RGS order."""
    if k < 1 or k > MAX_PARTITION_K:
        raise ValueError(f"partition enumeration supports 1 <= k <= {MAX_PARTITION_K}, got {k}")
    parts = set_partitions(k)
    for S in parts:
        for T in parts:
            yield PartitionPair(S, T)


@dataclass(frozen=True)
class Refinement:
    pieces: tuple[tuple[int, ...], ...]
    lookup: dict

    @classmethod
    def of(cls, pair: PartitionPair) -> "Refinement":
        pieces, lookup = [], {}
        for a, S in enumerate(pair.mean_partition):
            for b, T in enumerate(pair.cov_partition):
                inter = tuple(sorted(set(S) & set(T)))
                if inter:
                    lookup[(a, b)] = len(pieces)
                    pieces.append(inter)
                else:
                    lookup[(a, b)] = None
        return cls(tuple(pieces), lookup)

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)


def eta_margin(delta_out_cov: float, beta: float) -> float:
    """Margin Delta_out^(Q) / (100 beta^2)."""
    return delta_out_cov / (100.0 * beta * beta)


def cov_separation(covs, partition) -> float:
    """Smallest Frobenius gap between covariances in different blocks (inf if one block)."""
    gap = math.inf
    for b1, B1 in enumerate(partition):
        for B2 in partition[b1 + 1:]:
            for i in B1:
                for j in B2:
                    gap = min(gap, float(np.linalg.norm(covs[i] - covs[j])))
    return gap


def separation_profile(means, covs, pair: PartitionPair) -> dict:
    """Inner/outer mean and covariance separations of a partition pair (test harness)."""
    out = {}
    for name, P, vals in (("mu", pair.mean_partition, means), ("Q", pair.cov_partition, covs)):
        inner, outer = 0.0, math.inf
        for b1, B1 in enumerate(P):
            for i in B1:
                for j in B1:
                    inner = max(inner, float(np.linalg.norm(vals[i] - vals[j])))
                for B2 in P[b1 + 1:]:
                    for j in B2:
                        outer = min(outer, float(np.linalg.norm(vals[i] - vals[j])))
        out[f"in_{name}"] = inner
        out[f"out_{name}"] = outer
    return out


@dataclass(frozen=True)
class ClusteringFunction:
    pair: PartitionPair
    refinement: Refinement
    means: np.ndarray          # (k, d)
    covariances: np.ndarray    # (k, d, d) estimates Q-hat
    inverses: np.ndarray       # (k, d, d) clamped inverses K-hat
    thresholds: np.ndarray     # (k, k)
    eta: float
    mean_subspace: SubspaceBasis

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


def build_clustering(pair: PartitionPair, means, covariances, alpha: float,
                     thresholds=None, eta: float | None = None,
                     beta: float = 1.0) -> ClusteringFunction:
    """Assemble c(x) from estimates; eta defaults to the covariance-gap margin."""
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    Q = np.asarray(covariances, dtype=float).reshape(mu.shape[0], mu.shape[1], mu.shape[1])
    if pair.k != mu.shape[0]:
        raise ValueError(f"partition pair is over {pair.k} indices but {mu.shape[0]} estimates given")
    K = np.stack([clamp_inverse(q, alpha) for q in Q])
    k = mu.shape[0]
    t = np.zeros((k, k)) if thresholds is None else np.asarray(thresholds, dtype=float)
    if t.shape != (k, k):
        raise ValueError(f"threshold table must be {k}x{k}")
    if eta is None:
        gap = cov_separation(Q, pair.cov_partition)
        eta = eta_margin(gap, beta) if math.isfinite(gap) and gap > 0 else 1.0
    if not eta > 0:
        raise ValueError("eta must be positive")
    return ClusteringFunction(pair, Refinement.of(pair), mu, Q, K, t, float(eta), span_basis(mu))


def oracle_thresholds(true_covs, K_hat, slack: float = 0.0) -> np.ndarray:
    """t_ij = <Q_i, K_i - K_j> + <Q_j - Q_i, Q_i^{-1} - Q_j^{-1}> - slack.

    ``slack`` is the error allowance subtracted from the expected separation;
    zero places the threshold at the expected statistic under component j.
    """
    Q = np.asarray(true_covs, dtype=float)
    K = np.asarray(K_hat, dtype=float)
    k = Q.shape[0]
    inv = np.linalg.inv(Q)
    t = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                t[i, j] = (np.sum(Q[i] * (K[i] - K[j]))
                           + np.sum((Q[j] - Q[i]) * (inv[i] - inv[j])) - slack)
    return t


def midpoint_thresholds(true_covs, K_hat) -> np.ndarray:
    """Thresholds halfway between the expected statistics under components i and j."""
    Q = np.asarray(true_covs, dtype=float)
    K = np.asarray(K_hat, dtype=float)
    k = Q.shape[0]
    t = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                D = K[i] - K[j]
                t[i, j] = 0.5 * (np.sum(Q[i] * D) + np.sum(Q[j] * D))
    return t


def threshold_grid(beta: float, alpha: float, d: int, eta: float, per_pair_cap: int,
                   c: float = 2.0) -> np.ndarray:
    """Uniform grid on [-c beta d / alpha, c beta d / alpha] with spacing at most eta.

    When the full grid has more than ``per_pair_cap`` points only the central
    ``per_pair_cap`` lattice points are kept, centered so the grid stays
    symmetric about zero. The same grid serves every ordered pair (i, j).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if per_pair_cap < 1:
        raise ValueError("per_pair_cap must be at least 1")
    L = c * beta * d / alpha
    n = int(math.ceil(2 * L / eta)) + 1
    h = 2 * L / (n - 1)
    if n <= per_pair_cap:
        return np.linspace(-L, L, n)
    return h * (np.arange(per_pair_cap) - (per_pair_cap - 1) / 2.0)


def cluster_mean_batch(X, cf: ClusteringFunction):
    idx, rec = nearest_centers(X, cf.means, cf.mean_subspace)
    group_of = np.empty(cf.k, dtype=int)
    for a, S in enumerate(cf.pair.mean_partition):
        group_of[list(S)] = a
    return group_of[idx], rec


def cluster_cov_batch(recentered, cf: ClusteringFunction) -> np.ndarray:
    Y = np.atleast_2d(recentered)
    q = np.einsum("na,kab,nb->nk", Y, cf.inverses, Y)
    out = np.zeros(Y.shape[0], dtype=int)
    undecided = np.ones(Y.shape[0], dtype=bool)
    T = cf.pair.cov_partition
    for b, block in enumerate(T, start=1):
        outside = [j for j in range(cf.k) if j not in block]
        hit = np.zeros(Y.shape[0], dtype=bool)
        for i in block:
            ok = np.ones(Y.shape[0], dtype=bool)
            for j in outside:
                ok &= (q[:, i] - q[:, j]) < cf.thresholds[i, j] - cf.eta
            hit |= ok
        newly = hit & undecided
        out[newly] = b
        undecided &= ~hit
    return out


def classify_batch(X, cf: ClusteringFunction) -> np.ndarray:
    a, rec = cluster_mean_batch(X, cf)
    b = cluster_cov_batch(rec, cf)
    table = np.zeros((len(cf.pair.mean_partition), len(cf.pair.cov_partition) + 1), dtype=int)
    for (aa, bb), t in cf.refinement.lookup.items():
        table[aa, bb + 1] = 0 if t is None else t
    return table[a, b]


def cluster_mean(x, cf: ClusteringFunction) -> tuple[int, np.ndarray]:
    a, rec = cluster_mean_batch(np.asarray(x, dtype=float)[None, :], cf)
    return int(a[0]), rec[0]


def cluster_cov(x, cf: ClusteringFunction) -> int:
    _, rec = cluster_mean_batch(np.asarray(x, dtype=float)[None, :], cf)
    return int(cluster_cov_batch(rec, cf)[0])


def classify(x, cf: ClusteringFunction) -> int:
    return int(classify_batch(np.asarray(x, dtype=float)[None, :], cf)[0])

"""Crude parameter estimation from second and flattened fourth moments.

Means come from the top-k eigenspace of the empirical second moment; the
covariances from the top-k eigenspaces of three flattened fourth-moment
matrices built after recentering each sample at its nearest mean estimate.
Both stages cover the recovered subspaces with lattice nets and return every
net point as a candidate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

SYM_TOL = 1e-10
# eigenvalues this small (relative to the largest) are treated as exact zeros
ZERO_EIG_TOL = 1e-10


class CapExceeded(RuntimeError):
    """A brute-force enumeration would exceed its configured cap."""


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal columns spanning a recovered subspace."""
    basis: np.ndarray            # (ambient_dim, r)
    eigenvalues: np.ndarray      # (r,), eigenvalue attached to each column

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def complement(self) -> np.ndarray:
        return np.eye(self.ambient_dim) - self.projector()


def full_space(d: int) -> SubspaceBasis:
    return SubspaceBasis(np.eye(d), np.ones(d))


def topk_subspace(A: np.ndarray, k: int) -> SubspaceBasis:
    """Span of the eigenvectors of the k largest |eigenvalues| of symmetric A.

    Ties are broken by the signed eigenvalue (larger first), then by position
    in the ascending eigendecomposition.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > SYM_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    if k < 0:
        raise ValueError("k must be non-negative")
    k = min(k, A.shape[0])
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    idx = np.arange(vals.shape[0])
    order = np.lexsort((idx, -vals, -np.abs(vals)))[:k]
    return SubspaceBasis(vecs[:, order], vals[order])


def span_basis(vectors: np.ndarray, tol: float = 1e-10) -> SubspaceBasis:
    """Orthonormal basis of the span of the rows of ``vectors``; may be empty."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    d = V.shape[1]
    if V.size == 0:
        return SubspaceBasis(np.zeros((d, 0)), np.zeros(0))
    U, s, _ = np.linalg.svd(V.T, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return SubspaceBasis(np.zeros((d, 0)), np.zeros(0))
    keep = s > tol * max(1.0, s[0])
    return SubspaceBasis(U[:, keep], s[keep])


def lattice_net(sub: SubspaceBasis, radius: float, step: float,
                cap: int = 1_000_000) -> np.ndarray:
    """Axis-aligned lattice net inside a subspace.

    Points are sum_j step*m_j*v_j over integer m with Euclidean norm at most
    ``radius``. Directions whose eigenvalue is numerically zero carry no signal
    and collapse to the single coordinate 0. The origin is always present.
    Returns an array (n_points, ambient_dim) in lexicographic order of m.
    """
    if step <= 0:
        raise ValueError("net step must be positive")
    if radius < 0:
        raise ValueError("net radius must be non-negative")
    ev = np.abs(sub.eigenvalues)
    top = float(ev.max()) if ev.size else 0.0
    live = ev > ZERO_EIG_TOL * max(1.0, top)
    m_max = int(math.floor(radius / step + 1e-12))
    axes = [np.arange(-m_max, m_max + 1) if lv else np.zeros(1, dtype=int) for lv in live]
    total = math.prod(len(a) for a in axes)
    if total > cap:
        raise CapExceeded(
            f"lattice net would scan {total} points (cap {cap}); use a coarser step")
    if sub.rank == 0:
        return np.zeros((1, sub.ambient_dim))
    grid = np.array(list(itertools.product(*axes)), dtype=float) * step
    keep = np.sum(grid * grid, axis=1) <= radius * radius * (1 + 1e-12)
    return grid[keep] @ sub.basis.T


@dataclass
class CandidateList:
    """Parameter candidates with a provenance tag per entry.

    ``covariances`` is None for a means-only list and ``means`` is None for a
    covariances-only list.
    """
    means: np.ndarray | None
    covariances: np.ndarray | None
    provenance: list[str] = field(default_factory=list)

    def __len__(self):
        arr = self.means if self.means is not None else self.covariances
        return 0 if arr is None else arr.shape[0]

    def pairs(self):
        for i in range(len(self)):
            yield self.means[i], self.covariances[i]


def second_moment(samples: np.ndarray) -> np.ndarray:
    X = np.asarray(samples, dtype=float)
    M = X.T @ X / X.shape[0]
    return 0.5 * (M + M.T)


def crude_estimate_means(samples, k: int, R: float, beta: float, net_step: float,
                         cap: int = 100_000) -> tuple[CandidateList, SubspaceBasis]:
    """Net over the top-k eigenspace of the second moment, norm at most 2R.

    ``beta`` sets nothing here beyond documenting the natural granularity
    sqrt(beta); the caller picks ``net_step``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty sample set")
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    sub = topk_subspace(second_moment(X), k)
    net = lattice_net(sub, 2.0 * R, net_step, cap=cap)
    if net.shape[0] > cap:
        raise CapExceeded(f"{net.shape[0]} mean candidates exceed cap {cap}")
    return CandidateList(net, None, ["means"] * net.shape[0]), sub


def nearest_centers(X, means, subspace: SubspaceBasis) -> tuple[np.ndarray, np.ndarray]:
    """Indices of argmin_j ||mu_j - P x|| (ties to lowest j) and x - mu(x)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    if mu.shape[0] == 0:
        raise ValueError("at least one mean is required")
    PX = (X @ subspace.basis) @ subspace.basis.T
    d2 = np.sum((PX[:, None, :] - mu[None, :, :]) ** 2, axis=2)
    idx = np.argmin(d2, axis=1)
    return idx, X - mu[idx]


def nearest_center(x, means, subspace: SubspaceBasis) -> tuple[int, np.ndarray]:
    idx, rec = nearest_centers(np.asarray(x, dtype=float)[None, :], means, subspace)
    return int(idx[0]), rec[0]


@dataclass(frozen=True)
class MomentAccumulators:
    m2: np.ndarray
    c00: np.ndarray
    c01: np.ndarray
    c11: np.ndarray
    sample_count: int


def psi_moments(samples, means, subspace: SubspaceBasis, d_cap: int = 8,
                chunk: int = 8192) -> MomentAccumulators:
    """Empirical flattened fourth moments of the recentered samples.

    With P the projector onto ``subspace`` and Pc = I - P, each sample x gives
    z = P(x - mu(x)) and w = Pc x, and the three matrices average
    vec(zz^T)vec(zz^T)^T, vec(zw^T)vec(zw^T)^T and vec(ww^T)vec(ww^T)^T.
    The complement part never sees the means, so c11 does not depend on them.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = X.shape
    if d > d_cap:
        raise ValueError(
            f"dimension {d} exceeds the fourth-moment cap {d_cap}: the accumulators "
            f"need 3 x {d * d} x {d * d} doubles ({3 * d ** 4 * 8 / 1e6:.1f} MB)")
    if n == 0:
        raise ValueError("empty sample set")
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    B = subspace.basis
    m2 = np.zeros((d, d))
    acc = [np.zeros((d * d, d * d)) for _ in range(3)]
    for s in range(0, n, chunk):
        xc = X[s:s + chunk]
        m2 += xc.T @ xc
        idx, _ = nearest_centers(xc, mu, subspace)
        z = ((xc @ B) - mu[idx] @ B) @ B.T
        w = xc - (xc @ B) @ B.T
        for a, (u, v) in zip(acc, ((z, z), (z, w), (w, w))):
            F = (u[:, :, None] * v[:, None, :]).reshape(xc.shape[0], d * d)
            a += F.T @ F
    sym = lambda M: 0.5 * (M + M.T) / n
    return MomentAccumulators(sym(m2), sym(acc[0]), sym(acc[1]), sym(acc[2]), n)


@dataclass(frozen=True)
class EstimateConfig:
    mean_net_step: float = 1.0
    cov_net_step: float | None = None     # default: beta
    cov_net_radius: float | None = None   # default: beta * sqrt(d)
    R: float = 1.0
    beta: float = 1.0
    d_cap: int = 8
    max_mean_candidates: int = 10_000
    max_tuples: int = 10_000
    max_net_points: int = 100_000
    max_candidates: int = 1_000_000


def crude_estimate_covariances(samples, means, k: int, beta: float, d: int | None = None,
                               net_step: float | None = None, net_radius: float | None = None,
                               d_cap: int = 8, cap: int = 100_000) -> CandidateList:
    """Covariance candidates Q00 + Q01 + Q01^T + Q11 over the cross product of nets."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if d is None:
        d = X.shape[1]
    if X.shape[1] != d:
        raise ValueError(f"samples have dimension {X.shape[1]}, expected {d}")
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    step = beta if net_step is None else net_step
    radius = beta * math.sqrt(d) if net_radius is None else net_radius
    P = span_basis(mu)
    acc = psi_moments(X, mu, P, d_cap=d_cap)
    nets = [lattice_net(topk_subspace(C, k), radius, step, cap=cap)
            for C in (acc.c00, acc.c01, acc.c11)]
    total = math.prod(net.shape[0] for net in nets)
    if total > cap:
        raise CapExceeded(f"{total} covariance candidates exceed cap {cap}; use a coarser step")
    out = np.empty((total, d, d))
    for j, (a, b, c) in enumerate(itertools.product(*nets)):
        Q00 = a.reshape(d, d)
        Q01 = b.reshape(d, d)
        Q11 = c.reshape(d, d)
        Q = Q00 + Q01 + Q01.T + Q11
        out[j] = 0.5 * (Q + Q.T)
    return CandidateList(None, out, ["covariances"] * total)


def crude_estimate(samples, k: int, config: EstimateConfig,
                   cov_samples=None) -> CandidateList:
    """All (mean, covariance) pairs from mean k-tuples and their covariance nets.

    Mean tuples run over k-permutations with repetition of the mean candidates
    in lexicographic order. For each tuple every mean in the tuple is paired
    with every covariance candidate built from that tuple, so the list has
    sum over tuples of k * |covariance candidates(tuple)| entries.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    Y = X if cov_samples is None else np.atleast_2d(np.asarray(cov_samples, dtype=float))
    d = X.shape[1]
    mc, _ = crude_estimate_means(X, k, config.R, config.beta, config.mean_net_step,
                                 cap=config.max_mean_candidates)
    m = len(mc)
    n_tuples = m ** k
    if n_tuples > config.max_tuples:
        raise CapExceeded(
            f"{m} mean candidates give {n_tuples} {k}-tuples (cap {config.max_tuples}); "
            "use a coarser mean net")
    means_out, covs_out, tags = [], [], []
    for tup in itertools.product(range(m), repeat=k):
        cands = crude_estimate_covariances(
            Y, mc.means[list(tup)], k, config.beta, d, config.cov_net_step,
            config.cov_net_radius, config.d_cap, cap=config.max_net_points)
        if len(means_out) + k * len(cands) > config.max_candidates:
            raise CapExceeded(
                f"candidate list would exceed cap {config.max_candidates}; "
                "use coarser nets")
        label = "tuple=" + ",".join(str(i) for i in tup)
        for i in tup:
            for Q in cands.covariances:
                means_out.append(mc.means[i])
                covs_out.append(Q)
                tags.append(f"{label};mean={i}")
    return CandidateList(np.array(means_out).reshape(-1, d),
                         np.array(covs_out).reshape(-1, d, d), tags)

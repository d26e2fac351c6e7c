"""Piecewise-polynomial score model.

Inside each cluster piece the score is a polynomial in the standardized input
wherever the boundary indicator holds, and the linear score of the piece's
anchor Gaussian elsewhere. The softmax normalization below is what keeps the
polynomial's inputs bounded: with the anchor as reference, the softmax
arguments r_j + theta_j stay O(1) near the bulk of the piece.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusteringFunction, classify_batch
from .mixture import ConditioningParams


# ---------------------------------------------------------------------------
# polynomial features

def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponent table in graded-lex order: by total degree, then x1 before x2."""
    rows = []
    for deg in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            e = [0] * d
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(-1, d)


@dataclass(frozen=True)
class FeatureMap:
    degree: int
    d: int
    shift: np.ndarray
    scale: np.ndarray
    exponents: np.ndarray = field(init=False, repr=False, compare=False)
    _combos: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        shift = np.asarray(self.shift, dtype=float).reshape(self.d)
        scale = np.asarray(self.scale, dtype=float).reshape(self.d)
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise ValueError("standardization scale must be positive and finite")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "exponents", monomial_exponents(self.d, self.degree))
        combos = tuple(combo for deg in range(self.degree + 1)
                       for combo in itertools.combinations_with_replacement(range(self.d), deg))
        object.__setattr__(self, "_combos", combos)

    @property
    def n_features(self) -> int:
        return math.comb(self.d + self.degree, self.degree)

    @classmethod
    def fit(cls, X, degree: int) -> "FeatureMap":
        """Standardize by the sample mean and per-coordinate standard deviation."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        sd = X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return cls(degree, X.shape[1], X.mean(axis=0), sd)

    @classmethod
    def identity(cls, d: int, degree: int) -> "FeatureMap":
        return cls(degree, d, np.zeros(d), np.ones(d))


def eval_features(fm: FeatureMap, x) -> np.ndarray:
    """All monomials of degree <= l of the standardized input, graded-lex order."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != fm.d:
        raise ValueError(f"input has length {X.shape[1]}, feature map expects {fm.d}")
    Z = (X - fm.shift) / fm.scale
    out = np.empty((X.shape[0], len(fm._combos)))
    # each monomial extends a lower-degree one by a single factor
    index = {(): 0}
    out[:, 0] = 1.0
    for col, combo in enumerate(fm._combos[1:], start=1):
        parent = index[combo[:-1]]
        out[:, col] = out[:, parent] * Z[:, combo[-1]]
        index[combo] = col
    return out[0] if single else out


# ---------------------------------------------------------------------------
# softmax normalization and boundary indicator

@dataclass(frozen=True)
class PieceEstimates:
    """Estimated parameters of the components in one piece; position 0 is the anchor."""
    members: tuple[int, ...]
    means: np.ndarray        # (m, d)
    covariances: np.ndarray  # (m, d, d)
    inverses: np.ndarray     # (m, d, d)
    weights: np.ndarray      # (m,)

    @property
    def m(self) -> int:
        return len(self.members)


def piece_estimates(members, means, covariances, inverses, weights=None) -> PieceEstimates:
    members = tuple(sorted(int(i) for i in members))
    idx = list(members)
    mu = np.atleast_2d(np.asarray(means, dtype=float))[idx]
    Q = np.asarray(covariances, dtype=float)[idx]
    K = np.asarray(inverses, dtype=float)[idx]
    if weights is None:
        w = np.full(len(idx), 1.0 / len(idx))
    else:
        w = np.asarray(weights, dtype=float)[idx]
    return PieceEstimates(members, mu, Q, K, w)


def _mahalanobis(X, mu, K):
    D = X[:, None, :] - mu[None, :, :]
    return np.einsum("nja,jab,njb->nj", D, K, D)


def softmax_inputs(x, est: PieceEstimates) -> tuple[np.ndarray, np.ndarray]:
    """(r(x), theta) with the anchor (position 0) as reference.

    r_j = -1/2 |x - mu_j|^2_{K_j} + 1/2 |x - mu_1|^2_{K_1} + 1/2 <Q_1, K_j - K_1>
    theta_j = log(l_j / l_1) - 1/2 <Q_1, K_j - K_1> + 1/2 log(det Q_1 / det Q_j)
    Log-determinants come from the (clamped) inverses so exact inputs reproduce
    the posterior weights exactly.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    K, Q1 = est.inverses, est.covariances[0]
    maha = _mahalanobis(X, est.means, K)
    tr = np.einsum("ab,jab->j", Q1, K - K[0])
    r = -0.5 * maha + 0.5 * maha[:, :1] + 0.5 * tr
    r[:, 0] = 0.0
    logdetK = np.linalg.slogdet(K)[1]
    theta = (np.log(est.weights) - np.log(est.weights[0]) - 0.5 * tr
             + 0.5 * (logdetK - logdetK[0]))
    theta[0] = 0.0
    return (r[0], theta) if single else (r, theta)


def boundary_statistics(x, est: PieceEstimates) -> tuple[np.ndarray, np.ndarray]:
    """V1_j = |x-mu_j|^2_{K_j} - |x-mu_1|^2_{K_1} - <Q_1, K_j - K_1>, V2_j = |(K_j - K_1)(x - mu_j)|^2."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    K, Q1 = est.inverses, est.covariances[0]
    maha = _mahalanobis(X, est.means, K)
    tr = np.einsum("ab,jab->j", Q1, K - K[0])
    V1 = maha - maha[:, :1] - tr
    V1[:, 0] = 0.0
    D = X[:, None, :] - est.means[None, :, :]
    G = np.einsum("jab,njb->nja", K - K[0], D)
    V2 = np.sum(G * G, axis=2)
    V2[:, 0] = 0.0
    return V1, V2


def boundary_indicator(x, est: PieceEstimates, theta1: float, theta2: float):
    """1 where every |V1_j| <= theta1 and V2_j <= theta2."""
    X = np.asarray(x, dtype=float)
    V1, V2 = boundary_statistics(X, est)
    ok = np.all((np.abs(V1) <= theta1) & (V2 <= theta2), axis=1)
    return int(ok[0]) if X.ndim == 1 else ok.astype(int)


def piece_spread(est: PieceEstimates) -> float:
    """Largest parameter distance between two members of the piece."""
    best = 0.0
    for i in range(est.m):
        for j in range(i + 1, est.m):
            best = max(best, float(np.linalg.norm(est.means[i] - est.means[j])
                                   + np.linalg.norm(est.covariances[i] - est.covariances[j])))
    return best


def boundary_thresholds(alpha: float, beta: float, delta_in: float, m: int, delta: float,
                        c1: float = 8.0, c2: float = 8.0) -> tuple[float, float]:
    """theta1 = c1 beta D^2/alpha^2 log(m/delta), theta2 = c2 sqrt(beta) D^2/alpha^2 log(m/delta)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    L = math.log(max(m, 1) / delta)
    base = delta_in * delta_in / (alpha * alpha) * L
    return c1 * beta * base, c2 * math.sqrt(beta) * base


# ---------------------------------------------------------------------------
# the piecewise model

@dataclass(frozen=True)
class PieceModel:
    piece_index: int
    members: tuple[int, ...]
    anchor: int
    coefficients: np.ndarray   # (n_features, d)
    theta1: float
    theta2: float
    fallback_inverse: np.ndarray
    fallback_mean: np.ndarray


@dataclass(frozen=True)
class PiecewiseScoreModel:
    clustering: ClusteringFunction
    pieces: tuple[PieceModel, ...]
    feature_map: FeatureMap
    t: float
    weights: np.ndarray   # lambda-hat used in the softmax normalization

    def estimates(self, piece: PieceModel) -> PieceEstimates:
        cf = self.clustering
        return piece_estimates(piece.members, cf.means, cf.covariances, cf.inverses, self.weights)

    def __call__(self, x):
        return eval_piecewise_score(self, x)


def piece_indicator(model: PiecewiseScoreModel, X, labels=None):
    """Per-row piece label and boundary indicator."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if labels is None:
        labels = classify_batch(X, model.clustering)
    ind = np.zeros(X.shape[0], dtype=bool)
    for p in model.pieces:
        rows = labels == p.piece_index
        if np.any(rows):
            ind[rows] = boundary_indicator(X[rows], model.estimates(p), p.theta1, p.theta2) == 1
    return labels, ind


def eval_piecewise_score(model: PiecewiseScoreModel, x) -> np.ndarray:
    """Polynomial branch where the boundary indicator holds, anchor-linear score elsewhere."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    labels, ind = piece_indicator(model, X)
    out = np.empty_like(X)
    for p in model.pieces:
        rows = labels == p.piece_index
        poly = rows & ind
        if np.any(poly):
            out[poly] = eval_features(model.feature_map, X[poly]) @ p.coefficients
        lin = rows & ~ind
        if np.any(lin):
            out[lin] = -(X[lin] - p.fallback_mean) @ p.fallback_inverse.T
    return out[0] if single else out


def suggest_degree(params: ConditioningParams, m: int, delta_in: float, nu: float,
                   eps: float, max_degree: int = 64) -> int:
    """Advisory degree beta^2 m^2 nu^5 D^6 / (alpha^6 eps), constants set to one."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    raw = (params.beta ** 2 * m ** 2 * nu ** 5 * delta_in ** 6) / (params.alpha ** 6 * eps)
    if not math.isfinite(raw):
        return max_degree
    return int(min(max(math.floor(raw + 1e-9), 1), max_degree))

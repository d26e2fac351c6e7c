"""Well-conditioned Gaussian mixtures: sampling, density, exact score, noising."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

# relative slack when checking covariance eigenvalues against [alpha, beta]
EIG_TOL = 1e-10


class ConditioningError(ValueError):
    """A mixture violates its declared conditioning bounds."""


@dataclass(frozen=True)
class ConditioningParams:
    alpha: float
    beta: float
    radius_R: float
    lambda_min: float = 0.0

    def __post_init__(self):
        if not (0 < self.alpha <= 1.0):
            raise ConditioningError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.beta < 1.0:
            raise ConditioningError(f"beta must be >= 1, got {self.beta}")
        # bounds elsewhere assume R >= 1
        if self.radius_R < 1.0:
            raise ConditioningError(f"radius R must be >= 1, got {self.radius_R}")

    @property
    def tau(self) -> float:
        return (self.beta / self.alpha) * math.log(self.radius_R)


class GaussianComponent:
    """One Gaussian N(mean, covariance) with cached Cholesky factor and inverse."""

    __slots__ = ("mean", "covariance", "cached_factor", "cached_log_det",
                 "cached_inverse")

    def __init__(self, mean, covariance):
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("component parameters must be finite")
        cov = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0:
            raise ConditioningError(
                f"covariance is not positive definite: smallest eigenvalue {eig[0]:.6g}")
        L = np.linalg.cholesky(cov)
        inv = cho_solve((L, True), np.eye(d))
        inv = 0.5 * (inv + inv.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        L.setflags(write=False)
        inv.setflags(write=False)
        self.mean = mean
        self.covariance = cov
        self.cached_factor = L
        self.cached_log_det = float(2.0 * np.sum(np.log(np.diag(L))))
        self.cached_inverse = inv

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, X: np.ndarray) -> np.ndarray:
        """Log-density at the rows of X (n, d)."""
        diff = X - self.mean
        sol = solve_triangular(self.cached_factor, diff.T, lower=True)
        maha = np.sum(sol * sol, axis=0)
        return -0.5 * (maha + self.cached_log_det + self.d * math.log(2 * math.pi))

    def __repr__(self):
        return f"GaussianComponent(mean={self.mean.tolist()}, covariance={self.covariance.tolist()})"


def parameter_distance(a: GaussianComponent, b: GaussianComponent) -> float:
    """||mu_a - mu_b||_2 + ||Q_a - Q_b||_F."""
    if a.d != b.d:
        raise ValueError("components live in different dimensions")
    return float(np.linalg.norm(a.mean - b.mean) + np.linalg.norm(a.covariance - b.covariance))


@dataclass(frozen=True)
class LabeledSamples:
    """Points with the index of the component that generated each row."""
    labels: np.ndarray
    points: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


class GaussianMixture:
    """A k-component mixture whose parameters satisfy the conditioning bounds.

    Construction validates every invariant: eigenvalues of each covariance in
    [alpha, beta], ||mu_i|| + ||Q_i - I||_F <= R, weights summing to one and
    bounded below by lambda_min.
    """

    def __init__(self, components: Sequence[GaussianComponent], weights,
                 conditioning: ConditioningParams | None = None):
        if len(components) == 0:
            raise ValueError("a mixture needs at least one component")
        comps = [c if isinstance(c, GaussianComponent) else GaussianComponent(*c)
                 for c in components]
        d = comps[0].d
        if any(c.d != d for c in comps):
            raise ValueError("all components must share the same dimension")
        w = np.asarray(weights, dtype=float).copy()
        if w.shape != (len(comps),):
            raise ValueError(f"expected {len(comps)} weights, got shape {w.shape}")
        if np.any(w <= 0):
            raise ConditioningError("mixture weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConditioningError(f"weights sum to {w.sum()!r}, not 1")
        if conditioning is None:
            conditioning = tightest_conditioning(comps, w)
        self.components = tuple(comps)
        w.setflags(write=False)
        self.weights = w
        self.conditioning = conditioning
        self._validate()
        self._means = np.stack([c.mean for c in comps])
        self._inverses = np.stack([c.cached_inverse for c in comps])
        self._log_w = np.log(w)

    def _validate(self):
        cp = self.conditioning
        if cp.lambda_min > 0 and np.min(self.weights) < cp.lambda_min * (1 - 1e-12):
            raise ConditioningError(
                f"weight {np.min(self.weights)!r} is below lambda_min={cp.lambda_min!r}")
        eye = np.eye(self.d)
        for i, c in enumerate(self.components):
            eig = np.linalg.eigvalsh(c.covariance)
            if eig[0] < cp.alpha * (1 - EIG_TOL):
                raise ConditioningError(
                    f"component {i}: eigenvalue {eig[0]:.6g} below alpha={cp.alpha:.6g}")
            if eig[-1] > cp.beta * (1 + EIG_TOL):
                raise ConditioningError(
                    f"component {i}: eigenvalue {eig[-1]:.6g} above beta={cp.beta:.6g}")
            r = np.linalg.norm(c.mean) + np.linalg.norm(c.covariance - eye)
            if r > cp.radius_R * (1 + EIG_TOL):
                raise ConditioningError(
                    f"component {i}: ||mu|| + ||Q - I||_F = {r:.6g} exceeds R={cp.radius_R:.6g}")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def means(self) -> np.ndarray:
        return self._means

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([c.covariance for c in self.components])

    @property
    def inverses(self) -> np.ndarray:
        return self._inverses

    def component_log_pdfs(self, X: np.ndarray) -> np.ndarray:
        """(n, k) matrix of log lambda_i + log N_i(x)."""
        return np.stack([c.log_pdf(X) for c in self.components], axis=1) + self._log_w

    def __repr__(self):
        return f"GaussianMixture(d={self.d}, k={self.k}, weights={self.weights.tolist()})"


def tightest_conditioning(components, weights) -> ConditioningParams:
    """Smallest valid (alpha, beta, R, lambda_min) for the given parameters."""
    d = components[0].d
    eye = np.eye(d)
    lo = min(np.linalg.eigvalsh(c.covariance)[0] for c in components)
    hi = max(np.linalg.eigvalsh(c.covariance)[-1] for c in components)
    R = max(np.linalg.norm(c.mean) + np.linalg.norm(c.covariance - eye) for c in components)
    return ConditioningParams(alpha=min(lo, 1.0), beta=max(hi, 1.0),
                              radius_R=max(R, 1.0), lambda_min=float(np.min(weights)))


def make_mixture(means, covariances, weights, alpha=None, beta=None, R=None,
                 lambda_min=None) -> GaussianMixture:
    """Build a mixture from raw arrays; unspecified bounds default to the tightest."""
    comps = [GaussianComponent(m, q) for m, q in zip(means, covariances)]
    w = np.asarray(weights, dtype=float)
    tight = tightest_conditioning(comps, w)
    cp = ConditioningParams(
        alpha=tight.alpha if alpha is None else alpha,
        beta=tight.beta if beta is None else beta,
        radius_R=tight.radius_R if R is None else R,
        lambda_min=tight.lambda_min if lambda_min is None else lambda_min,
    )
    return GaussianMixture(comps, w, cp)


def _as_batch(mix: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != mix.d:
        raise ValueError(f"points have length {X.shape[1]}, mixture dimension is {mix.d}")
    return X, single


def log_density(mix: GaussianMixture, x) -> np.ndarray | float:
    """log sum_i lambda_i N(x; mu_i, Q_i), evaluated with log-sum-exp."""
    X, single = _as_batch(mix, x)
    out = logsumexp(mix.component_log_pdfs(X), axis=1)
    return float(out[0]) if single else out


def posterior_weights(mix: GaussianMixture, x) -> np.ndarray:
    """w_i(x) = lambda_i N_i(x) / sum_j lambda_j N_j(x), shape (n, k) or (k,)."""
    X, single = _as_batch(mix, x)
    lp = mix.component_log_pdfs(X)
    w = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return w[0] if single else w


def exact_score(mix: GaussianMixture, x) -> np.ndarray:
    """Gradient of log density: -sum_i w_i(x) Q_i^{-1} (x - mu_i)."""
    X, single = _as_batch(mix, x)
    w = posterior_weights(mix, X)
    diff = X[:, None, :] - mix.means[None, :, :]
    g = np.einsum("kab,nkb->nka", mix.inverses, diff)
    s = -np.einsum("nk,nka->na", w, g)
    return s[0] if single else s


def sample_mixture(mix: GaussianMixture, n: int, rng: np.random.Generator) -> LabeledSamples:
    """Draw n labeled points; labels ~ lambda, points = mu_i + L_i z."""
    if n < 1:
        raise ValueError("n must be at least 1")
    labels = rng.choice(mix.k, size=n, p=mix.weights)
    z = rng.standard_normal((n, mix.d))
    points = np.empty((n, mix.d))
    for i, c in enumerate(mix.components):
        idx = labels == i
        points[idx] = c.mean + z[idx] @ c.cached_factor.T
    return LabeledSamples(labels=labels, points=points)


def noised_mixture(mix: GaussianMixture, t: float) -> GaussianMixture:
    """Law of x_t = e^{-t} x_0 + sqrt(1 - e^{-2t}) z when x_0 ~ mix."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return mix
    a = math.exp(-t)
    a2 = math.exp(-2 * t)
    b2 = -math.expm1(-2 * t)
    eye = np.eye(mix.d)
    comps = [GaussianComponent(a * c.mean, a2 * c.covariance + b2 * eye)
             for c in mix.components]
    cp = mix.conditioning
    # eigenvalues move affinely toward 1, so the interval shrinks toward [.., 1, ..]
    new_cp = ConditioningParams(
        alpha=min(a2 * cp.alpha + b2, 1.0),
        beta=max(a2 * cp.beta + b2, 1.0),
        radius_R=max(a * cp.radius_R, 1.0),
        lambda_min=cp.lambda_min,
    )
    return GaussianMixture(comps, mix.weights, new_cp)


def forward_sample(mix: GaussianMixture, t: float, n: int, rng: np.random.Generator):
    """Draw (x0, xt, zt) triples of the forward noising process at time t > 0."""
    if t <= 0:
        raise ValueError("forward_sample needs t > 0: the denoising target is undefined at t = 0")
    x0 = sample_mixture(mix, n, rng).points
    zt = rng.standard_normal((n, mix.d))
    xt = math.exp(-t) * x0 + math.sqrt(-math.expm1(-2 * t)) * zt
    return x0, xt, zt


def restrict(mix: GaussianMixture, U) -> GaussianMixture:
    """Sub-mixture on the index set U with renormalized weights."""
    idx = sorted(set(int(i) for i in U))
    if not idx:
        raise ValueError("restriction to an empty index set")
    if idx[0] < 0 or idx[-1] >= mix.k:
        raise ValueError(f"indices {idx} out of range for k={mix.k}")
    if len(idx) == mix.k:
        return mix
    w = mix.weights[idx]
    w = w / w.sum()
    cp = mix.conditioning
    cp = ConditioningParams(cp.alpha, cp.beta, cp.radius_R, min(cp.lambda_min, float(w.min())))
    return GaussianMixture([mix.components[i] for i in idx], w, cp)

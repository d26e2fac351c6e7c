"""Monte Carlo checks with exact or quadrature oracles.

Every check returns an MCReport carrying the estimate, its standard error,
the bound it is compared against and the pass flag, plus the criterion text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from .mixture import (GaussianComponent, GaussianMixture, exact_score, noised_mixture,
                      posterior_weights, restrict, sample_mixture)


@dataclass
class MCReport:
    name: str
    estimate: float
    std_error: float
    n: int
    bound: float | None
    passed: bool
    criterion: str
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"check": self.name, "estimate": self.estimate, "std_error": self.std_error,
               "n": self.n, "bound": self.bound, "pass": self.passed,
               "criterion": self.criterion}
        out.update(self.extras)
        return out


def mean_and_se(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def jackknife_ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """sum(num)/sum(den) with its delete-one jackknife standard error."""
    n = num.size
    sn, sd = num.sum(), den.sum()
    loo = (sn - num) / (sd - den)
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(sn / sd), float(se)


# ---------------------------------------------------------------------------
# score accuracy

def score_l2_error(score, mix: GaussianMixture, t: float, n: int,
                   rng: np.random.Generator, rel_tol: float | None = None) -> MCReport:
    """E|s_hat(x) - grad log q_t(x)|^2 over x ~ q_t, with relative error alongside."""
    if t < 0:
        raise ValueError("t must be non-negative")
    q = noised_mixture(mix, t)
    X = sample_mixture(q, n, rng).points
    truth = exact_score(q, X)
    pred = score(X)
    resid = np.sum((pred - truth) ** 2, axis=1)
    norm2 = np.sum(truth ** 2, axis=1)
    est, se = mean_and_se(resid)
    rel, rel_se = jackknife_ratio(resid, norm2)
    passed = True if rel_tol is None else rel <= rel_tol
    crit = "reported only" if rel_tol is None else f"relative error <= {rel_tol}"
    return MCReport("score_l2_error", est, se, n, rel_tol, bool(passed), crit,
                    {"relative": rel, "relative_se": rel_se,
                     "score_norm2": float(norm2.mean())})


def score_difference(mix: GaussianMixture, U, X) -> np.ndarray:
    """s(x; M) - s(x; M(U)) computed without cancellation.

    With W the total posterior weight outside U, the difference equals
    W * sum_{i in U} w_i^U g_i - sum_{j not in U} w_j g_j, g_i = Q_i^{-1}(x - mu_i).
    """
    U = sorted(set(int(i) for i in U))
    out_idx = [j for j in range(mix.k) if j not in U]
    X = np.atleast_2d(X)
    lp = mix.component_log_pdfs(X)
    lse = logsumexp(lp, axis=1, keepdims=True)
    w = np.exp(lp - lse)
    diff = X[:, None, :] - mix.means[None, :, :]
    g = np.einsum("kab,nkb->nka", mix.inverses, diff)
    if not out_idx:
        return np.zeros_like(X)
    lpU = lp[:, U]
    wU = np.exp(lpU - logsumexp(lpU, axis=1, keepdims=True))
    W_out = np.exp(logsumexp(lp[:, out_idx], axis=1) - lse[:, 0])
    inside = np.einsum("nk,nka->na", wU, g[:, U, :])
    outside = np.einsum("nk,nka->na", w[:, out_idx], g[:, out_idx, :])
    return W_out[:, None] * inside - outside


def score_simplification_error(mix: GaussianMixture, U, n: int, rng: np.random.Generator,
                               bound: float | None = None) -> MCReport:
    """E_{x ~ M(U)} |s(x; M) - s(x; M(U))|^2."""
    U = sorted(set(int(i) for i in U))
    if len(U) == mix.k:
        return MCReport("score_simplification", 0.0, 0.0, n, bound, True, "U = [k]: exactly zero")
    sub = restrict(mix, U)
    X = sample_mixture(sub, n, rng).points
    vals = np.sum(score_difference(mix, U, X) ** 2, axis=1)
    est, se = mean_and_se(vals)
    passed = True if bound is None else est <= bound
    crit = "reported only" if bound is None else f"estimate <= {bound}"
    return MCReport("score_simplification", est, se, n, bound, bool(passed), crit)


def score_simplification_quadrature(mix: GaussianMixture, U) -> float:
    """1-D quadrature of the same expectation (oracle for d = 1)."""
    if mix.d != 1:
        raise ValueError("quadrature oracle is one-dimensional")
    sub = restrict(mix, U)

    def f(x):
        xx = np.array([[x]])
        dens = math.exp(float(logsumexp(sub.component_log_pdfs(xx))))
        return dens * float(np.sum(score_difference(mix, U, xx) ** 2))

    lo = float(sub.means.min() - 40 * math.sqrt(sub.covariances.max()))
    hi = float(sub.means.max() + 40 * math.sqrt(sub.covariances.max()))
    pts = sorted(set(float(m) for m in mix.means[:, 0]) | {0.0})
    pts = [p for p in pts if lo < p < hi]
    val, _ = integrate.quad(f, lo, hi, points=pts or None, limit=500, epsabs=0, epsrel=1e-10)
    return float(val)


# ---------------------------------------------------------------------------
# fourth moment of a quadratic form

def fourth_moment_closed_form(A, mu, Q) -> float:
    """E[(x^T A x)^2] for x ~ N(mu, Q).

    Only the symmetric part of A contributes to x^T A x, so the formula is
    evaluated at S = (A + A^T)/2:
      <S,Q>^2 + 2|Q^h S Q^h|_F^2 + |Q^h S^T mu|^2 + |Q^h S mu|^2
      + (mu^T S mu)^2 + 2 mu^T S mu <Q,S> + 2 tr(Q^h S mu mu^T S Q^h).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    S = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    Qh = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
    inner = float(np.sum(S * Q))
    B = Qh @ S @ Qh
    quad = float(mu @ S @ mu)
    v1 = Qh @ S.T @ mu
    v2 = Qh @ S @ mu
    M = Qh @ S @ np.outer(mu, mu) @ S @ Qh
    return (inner ** 2 + 2.0 * float(np.sum(B * B)) + float(v1 @ v1) + float(v2 @ v2)
            + quad ** 2 + 2.0 * quad * inner + 2.0 * float(np.trace(M)))


def fourth_moment_check(A, mu, Q, n: int, rng: np.random.Generator,
                        n_se: float = 4.0, chunk: int = 250_000) -> MCReport:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.linalg.norm(A) > 0:
        raise ValueError("test matrix must be nonzero")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    L = np.linalg.cholesky(np.atleast_2d(Q))
    closed = fourth_moment_closed_form(A, mu, Q)
    s1 = s2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        X = mu + rng.standard_normal((m, mu.size)) @ L.T
        y = np.einsum("na,ab,nb->n", X, A, X) ** 2
        s1 += float(y.sum())
        s2 += float((y * y).sum())
        done += m
    est = s1 / n
    var = max(s2 / n - est * est, 0.0) * n / max(n - 1, 1)
    se = math.sqrt(var / n)
    gap = abs(est - closed)
    passed = gap <= n_se * se if se > 0 else gap <= 1e-12 * max(1.0, abs(closed))
    return MCReport("fourth_moment", est, se, n, closed, bool(passed),
                    f"|MC - closed form| <= {n_se} SE", {"closed_form": closed,
                                                         "z": gap / se if se > 0 else 0.0})


# ---------------------------------------------------------------------------
# overlap between two Gaussians

def correlation_bound(comp1: GaussianComponent, comp2: GaussianComponent,
                      alpha: float, beta: float) -> float:
    """exp(-|mu1 - mu2|^2 / beta - |Q1 - Q2|_F^2 / c), c = 16 (1 + beta/alpha)^2 beta^2."""
    c = 16.0 * (1.0 + beta / alpha) ** 2 * beta ** 2
    dm = float(np.sum((comp1.mean - comp2.mean) ** 2))
    dq = float(np.sum((comp1.covariance - comp2.covariance) ** 2))
    return math.exp(-dm / beta - dq / c)


def half_bhattacharyya(comp1: GaussianComponent, comp2: GaussianComponent) -> float:
    """(1/2) * Bhattacharyya coefficient, a valid upper bound on the overlap ratio."""
    Qm = 0.5 * (comp1.covariance + comp2.covariance)
    u = comp1.mean - comp2.mean
    _, ld = np.linalg.slogdet(Qm)
    log_bc = (0.25 * (comp1.cached_log_det + comp2.cached_log_det) - 0.5 * ld
              - 0.125 * float(u @ np.linalg.solve(Qm, u)))
    return 0.5 * math.exp(log_bc)


def _overlap_values(comp1, comp2, X):
    l1 = comp1.log_pdf(X)
    l2 = comp2.log_pdf(X)
    return np.exp(l2 - np.logaddexp(l1, l2))


def overlap_quadrature(comp1: GaussianComponent, comp2: GaussianComponent) -> float:
    """1-D quadrature of E_{x ~ N1}[N2/(N1 + N2)]."""
    if comp1.d != 1:
        raise ValueError("quadrature oracle is one-dimensional")
    m1, s1 = float(comp1.mean[0]), math.sqrt(float(comp1.covariance[0, 0]))

    def f(x):
        xx = np.array([[x]])
        return math.exp(float(comp1.log_pdf(xx)[0])) * float(_overlap_values(comp1, comp2, xx)[0])

    lo, hi = m1 - 40 * s1, m1 + 40 * s1
    pts = [float(comp2.mean[0]), 0.5 * (m1 + float(comp2.mean[0]))]
    pts = [p for p in pts if lo < p < hi]
    val, _ = integrate.quad(f, lo, hi, points=pts or None, limit=500, epsabs=0, epsrel=1e-10)
    return float(val)


def correlation_bound_check(comp1: GaussianComponent, comp2: GaussianComponent, n: int,
                            rng: np.random.Generator, alpha: float, beta: float,
                            n_se: float = 3.0) -> MCReport:
    """Overlap E_{x ~ N1}[N2/(N1+N2)] against the exponential bound; quadrature when d = 1."""
    bound = correlation_bound(comp1, comp2, alpha, beta)
    X = comp1.mean + rng.standard_normal((n, comp1.d)) @ comp1.cached_factor.T
    est, se = mean_and_se(_overlap_values(comp1, comp2, X))
    extras = {"half_bhattacharyya": half_bhattacharyya(comp1, comp2), "method": "mc"}
    if comp1.d == 1:
        est = overlap_quadrature(comp1, comp2)
        extras["method"] = "quadrature"
        extras["mc_estimate"] = float(np.mean(_overlap_values(comp1, comp2, X)))
        se_used = 0.0
    else:
        se_used = se
    passed = est <= bound + n_se * se_used
    return MCReport("correlation_bound", est, se_used, n, bound, bool(passed),
                    f"estimate <= bound + {n_se} SE", extras)


# ---------------------------------------------------------------------------
# Hanson-Wright tails

def hanson_wright_tail_check(A, s_values, n: int, rng: np.random.Generator,
                             c_test: float = 0.1) -> list[MCReport]:
    """Empirical Pr[x^T A x - tr A > s |A|_F] vs exp(-c min(s sqrt(r), s^2))."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = 0.5 * (A + A.T)
    fro = float(np.linalg.norm(A))
    op = float(np.linalg.norm(A, 2))
    r = fro * fro / (op * op)
    d = A.shape[0]
    # the form only sees S; its eigenvalues make sampling O(n d)
    lam = np.linalg.eigvalsh(S)
    Z = rng.standard_normal((n, d))
    dev = (Z * Z) @ lam - float(np.trace(A))
    out = []
    for s in s_values:
        if s <= 0:
            raise ValueError("s values must be positive")
        hits = dev > s * fro
        p = float(hits.mean())
        se = math.sqrt(max(p * (1 - p), 0.0) / n)
        bound = math.exp(-c_test * min(s * math.sqrt(r), s * s))
        out.append(MCReport("hanson_wright", p, se, n, bound, p <= bound,
                            f"tail <= exp(-{c_test} min(s sqrt(r), s^2))",
                            {"s": float(s), "r": r}))
    return out


def chi2_tail_oracle(s: float) -> float:
    """Pr[chi^2_1 > 1 + s], the exact tail for A = e1 e1^T."""
    return float(stats.chi2.sf(1.0 + s, df=1))


# ---------------------------------------------------------------------------
# Gaussian KL and sample diagnostics

def kl_gaussian(comp1: GaussianComponent, comp2: GaussianComponent) -> float:
    """KL(N1 || N2) in closed form."""
    Q2 = comp2.covariance
    if np.linalg.eigvalsh(Q2)[0] <= 0:
        raise ValueError("second covariance is singular")
    d = comp1.d
    K2 = comp2.cached_inverse
    u = comp2.mean - comp1.mean
    return 0.5 * (float(np.sum(K2 * comp1.covariance)) - d + float(u @ K2 @ u)
                  + comp2.cached_log_det - comp1.cached_log_det)


def sliced_w1(a: np.ndarray, b: np.ndarray, n_projections: int,
              rng: np.random.Generator) -> float:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = a.shape[1]
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    if a.shape[0] == b.shape[0]:
        return float(np.mean(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))))
    return float(np.mean([stats.wasserstein_distance(pa[:, j], pb[:, j])
                          for j in range(n_projections)]))


def distribution_diagnostics(samples_a, samples_b, n_projections: int,
                             rng: np.random.Generator, w1_tol: float | None = None) -> MCReport:
    """Sliced Wasserstein-1 plus mean and covariance gaps.

    Total variation is not estimable from samples at this scale; these are
    proxies.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    w1 = sliced_w1(a, b, n_projections, rng)
    mean_gap = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    cov_gap = float(np.linalg.norm(np.atleast_2d(np.cov(a.T)) - np.atleast_2d(np.cov(b.T))))
    passed = True if w1_tol is None else w1 <= w1_tol
    crit = "reported only" if w1_tol is None else f"sliced W1 <= {w1_tol}"
    return MCReport("distribution", w1, 0.0, min(a.shape[0], b.shape[0]), w1_tol, bool(passed),
                    crit, {"mean_gap": mean_gap, "cov_gap": cov_gap})


def pointwise_removal_terms(mix: GaussianMixture, x, i: int, j: int) -> tuple[float, float]:
    """Left and right sides of the pointwise bound on |s - s^{-j}|^4.

    s^{-j} drops component j. The right side is
    8 sum_{l != j} (D_j/A)(D_l/B)|g_i - g_l|^4 + 8 (D_j/A)|g_j - g_i|^4
    with D_l = lambda_l N_l(x), A = sum_l D_l, B = A - D_j.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    lp = mix.component_log_pdfs(X)[0]
    lse = float(logsumexp(lp))
    wj = math.exp(lp[j] - lse)
    others = [l for l in range(mix.k) if l != j]
    lpo = lp[others]
    wo = np.exp(lpo - logsumexp(lpo))
    g = np.array([mix.inverses[l] @ (X[0] - mix.means[l]) for l in range(mix.k)])
    s_full = -np.sum(np.exp(lp - lse)[:, None] * g, axis=0)
    s_minus = -np.sum(wo[:, None] * g[others], axis=0)
    lhs = float(np.sum((s_full - s_minus) ** 2) ** 2)
    rhs = 8.0 * sum(wj * wo[n] * float(np.sum((g[i] - g[l]) ** 2) ** 2)
                    for n, l in enumerate(others))
    rhs += 8.0 * wj * float(np.sum((g[j] - g[i]) ** 2) ** 2)
    return lhs, rhs


def clustering_accuracy(mix: GaussianMixture, pair, n: int, rng: np.random.Generator,
                        thresholds: str = "oracle", slack: float = 0.0,
                        tol: float = 0.01) -> MCReport:
    """Per-component misclassification of c(x) built from the true parameters.

    A draw from component i counts as correct when its piece contains i.
    ``thresholds`` is "oracle" (expected separation minus ``slack``) or
    "midpoint".
    """
    from .clustering import build_clustering, classify_batch, midpoint_thresholds, oracle_thresholds

    cp = mix.conditioning
    cf = build_clustering(pair, mix.means, mix.covariances, cp.alpha, beta=cp.beta)
    if thresholds == "oracle":
        table = oracle_thresholds(mix.covariances, cf.inverses, slack)
    elif thresholds == "midpoint":
        table = midpoint_thresholds(mix.covariances, cf.inverses)
    else:
        raise ValueError(f"unknown threshold rule {thresholds!r}")
    cf = build_clustering(pair, mix.means, mix.covariances, cp.alpha, table, cf.eta, cp.beta)
    s = sample_mixture(mix, n, rng)
    pieces = classify_batch(s.points, cf)
    member = np.zeros((cf.refinement.n_pieces, mix.k), dtype=bool)
    for p, U in enumerate(cf.refinement.pieces):
        member[p, list(U)] = True
    wrong = ~member[pieces, s.labels]
    rates = [float(wrong[s.labels == i].mean()) if np.any(s.labels == i) else 0.0
             for i in range(mix.k)]
    worst = max(rates)
    return MCReport("clustering", worst, math.sqrt(max(worst * (1 - worst), 0.0) / max(n // mix.k, 1)),
                    n, tol, worst <= tol, f"per-component misclassification <= {tol}",
                    {"rates": rates, "thresholds": thresholds, "eta": cf.eta})

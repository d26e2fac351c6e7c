"""Fitting piecewise-polynomial scores with the clipped denoising loss.

Each piece is fit by ridge least squares against the denoising target
-z_t / sqrt(1 - e^{-2t}). The outer loop brute-forces candidate parameter
tuples, partition pairs and threshold tables, and keeps the model with the
smallest validation loss (ties go to the earliest enumerated combination).
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .clustering import (ClusteringFunction, PartitionPair, build_clustering,
                         classify_batch, enumerate_partition_pairs, threshold_grid)
from .mixture import GaussianMixture, exact_score, forward_sample, noised_mixture
from .score_model import (FeatureMap, PieceModel, PiecewiseScoreModel, boundary_indicator,
                          boundary_thresholds, eval_features, eval_piecewise_score,
                          piece_estimates, piece_spread)
from .spectral import CandidateList, CapExceeded


@dataclass(frozen=True)
class DenoisingBatch:
    xt: np.ndarray
    targets: np.ndarray
    zt: np.ndarray
    t: float

    def __len__(self):
        return self.xt.shape[0]


@dataclass(frozen=True)
class ClipConfig:
    R_x: float
    R_z: float

    def mask(self, batch: DenoisingBatch) -> np.ndarray:
        return ((np.linalg.norm(batch.xt, axis=1) <= self.R_x)
                & (np.linalg.norm(batch.zt, axis=1) <= self.R_z))


def noise_scale(t: float) -> float:
    return math.sqrt(-math.expm1(-2.0 * t))


def batch_from_clean(x0, t: float, rng: np.random.Generator) -> DenoisingBatch:
    """Noise given clean samples to time t and attach the denoising targets."""
    if t <= 0:
        raise ValueError("denoising batches need t > 0")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    z = rng.standard_normal(x0.shape)
    sig = noise_scale(t)
    xt = math.exp(-t) * x0 + sig * z
    return DenoisingBatch(xt, -z / sig, z, float(t))


def make_denoising_batch(mix: GaussianMixture, t: float, n: int,
                         rng: np.random.Generator) -> DenoisingBatch:
    if t <= 0:
        raise ValueError("denoising batches need t > 0")
    _, xt, zt = forward_sample(mix, t, n, rng)
    return DenoisingBatch(xt, -zt / noise_scale(t), zt, float(t))


def default_clip(batch: DenoisingBatch) -> ClipConfig:
    """Twice the largest training norms, so clipping is inactive on the bulk."""
    return ClipConfig(2.0 * float(np.max(np.linalg.norm(batch.xt, axis=1))),
                      2.0 * float(np.max(np.linalg.norm(batch.zt, axis=1))))


def exact_score_oracle(mix: GaussianMixture, t: float) -> Callable:
    """x -> grad log q_t(x) for the mixture noised to time t."""
    if t < 0:
        raise ValueError("t must be non-negative")
    q = noised_mixture(mix, t)
    return lambda x: exact_score(q, x)


def solve_ridge(Phi: np.ndarray, Y: np.ndarray, ridge: float, name: str = "piece") -> np.ndarray:
    """argmin |Phi B - Y|^2 + lam |B|^2 via Cholesky on the normal equations.

    ``lam`` is ``ridge`` times the mean diagonal of the Gram matrix.
    """
    F = Phi.shape[1]
    if Phi.shape[0] == 0:
        if ridge > 0:
            return np.zeros((F, Y.shape[1]))
        raise LinAlgError(f"{name}: no training rows and ridge = 0")
    G = Phi.T @ Phi
    rhs = Phi.T @ Y
    if ridge > 0:
        G = G + ridge * (np.trace(G) / F) * np.eye(F)
    try:
        c = cho_factor(G, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise LinAlgError(
            f"{name}: normal equations are singular ({Phi.shape[0]} rows, {F} features); "
            "add ridge or more data") from exc
    return cho_solve(c, rhs)


def default_piece_thresholds(cf: ClusteringFunction, weights, alpha: float, beta: float,
                             delta: float, c1: float, c2: float,
                             spread_floor: float) -> list[tuple[float, float]]:
    out = []
    for members in cf.refinement.pieces:
        est = piece_estimates(members, cf.means, cf.covariances, cf.inverses, weights)
        spread = max(piece_spread(est), spread_floor)
        out.append(boundary_thresholds(alpha, beta, spread, len(members), delta, c1, c2))
    return out


def fit_pieces(batch: DenoisingBatch, clustering: ClusteringFunction, feature_map: FeatureMap,
               thresholds: Sequence[tuple[float, float]], ridge: float = 1e-8,
               weights=None, clip: ClipConfig | None = None,
               features: np.ndarray | None = None, labels: np.ndarray | None = None
               ) -> list[PieceModel]:
    """Least-squares polynomial per piece on rows with that label, indicator 1 and unclipped.

    ``features`` and ``labels`` may carry precomputed values for ``batch.xt``.
    """
    cf = clustering
    X = batch.xt
    if labels is None:
        labels = classify_batch(X, cf)
    if features is None:
        features = eval_features(feature_map, X)
    keep = np.ones(len(batch), dtype=bool) if clip is None else clip.mask(batch)
    pieces = []
    for p, members in enumerate(cf.refinement.pieces):
        est = piece_estimates(members, cf.means, cf.covariances, cf.inverses, weights)
        th1, th2 = thresholds[p]
        rows = np.flatnonzero((labels == p) & keep)
        if rows.size:
            ind = boundary_indicator(X[rows], est, th1, th2) == 1
            rows = rows[ind]
        coef = solve_ridge(features[rows], batch.targets[rows], ridge, name=f"piece {p}")
        anchor = est.members[0]
        pieces.append(PieceModel(p, est.members, anchor, coef, float(th1), float(th2),
                                 cf.inverses[anchor].copy(), cf.means[anchor].copy()))
    return pieces


def clipped_loss(model, batch: DenoisingBatch, clip: ClipConfig | None = None) -> float:
    """Mean over all rows of |s(x_t) - target|^2, zeroed on clipped rows."""
    pred = model(batch.xt) if callable(model) else eval_piecewise_score(model, batch.xt)
    res = np.sum((pred - batch.targets) ** 2, axis=1)
    if clip is not None:
        res = np.where(clip.mask(batch), res, 0.0)
    return float(np.mean(res))


@dataclass(frozen=True)
class LearnConfig:
    degree: int = 6
    ridge: float = 1e-8
    clip: ClipConfig | None = None
    n_train: int = 200_000
    n_val: int = 50_000
    c1: float = 8.0
    c2: float = 8.0
    delta: float = 0.01
    spread_floor: float = 1.0
    alpha: float | None = None
    beta: float | None = None
    threshold_cap: int = 3
    threshold_range: float = 2.0
    max_tuples: int = 10_000
    max_partition_pairs: int = 2704
    max_combinations: int = 20_000
    weights: tuple | None = None
    seed: int = 0
    threads: int = 1


@dataclass(frozen=True)
class FitRecord:
    candidate_id: int
    partition_id: int
    threshold_id: int
    train_loss: float
    val_loss: float


def _unique_pairs(candidates: CandidateList):
    seen, means, covs = {}, [], []
    for m, q in candidates.pairs():
        key = (m.tobytes(), q.tobytes())
        if key not in seen:
            seen[key] = len(means)
            means.append(m)
            covs.append(q)
    return np.array(means), np.array(covs)


def _threshold_tables(pair: PartitionPair, k: int, grid: np.ndarray):
    """Threshold tables over the ordered pairs (i, j) that sit in different covariance blocks."""
    block_of = {}
    for b, block in enumerate(pair.cov_partition):
        for i in block:
            block_of[i] = b
    cross = [(i, j) for i in range(k) for j in range(k) if block_of[i] != block_of[j]]
    if not cross:
        yield np.zeros((k, k))
        return
    for values in itertools.product(grid, repeat=len(cross)):
        t = np.zeros((k, k))
        for (i, j), v in zip(cross, values):
            t[i, j] = v
        yield t


def _n_tables(pair: PartitionPair, k: int, grid_size: int) -> int:
    sizes = [len(b) for b in pair.cov_partition]
    n_cross = k * k - sum(s * s for s in sizes)
    return grid_size ** n_cross if n_cross else 1


@dataclass
class LearnResult:
    model: PiecewiseScoreModel
    val_loss: float
    report: list[FitRecord]
    clip: ClipConfig


def learn_score(source, t: float, candidates: CandidateList, k: int, config: LearnConfig,
                rng: np.random.Generator, candidate_tuples=None, partition_pairs=None,
                threshold_tables=None, dedupe: bool = True) -> LearnResult:
    """Brute-force search over (candidate tuple, partition pair, thresholds) by validation loss.

    ``source`` is either a GaussianMixture to sample from, or an array of
    clean samples (the first n_train rows train, the next n_val validate).
    ``candidate_tuples`` (tuples of indices into the de-duplicated candidate
    pairs), ``partition_pairs`` and ``threshold_tables`` override the
    enumerations, as in oracle mode.
    """
    if len(candidates) == 0:
        raise ValueError("candidate list is empty")
    r_train, r_val = rng.spawn(2)
    if isinstance(source, GaussianMixture):
        train = make_denoising_batch(source, t, config.n_train, r_train)
        val = make_denoising_batch(source, t, config.n_val, r_val)
        alpha = config.alpha if config.alpha is not None else source.conditioning.alpha
        beta = config.beta if config.beta is not None else source.conditioning.beta
    else:
        x0 = np.atleast_2d(np.asarray(source, dtype=float))
        if x0.shape[0] < config.n_train + config.n_val:
            raise ValueError(f"need {config.n_train + config.n_val} clean samples, got {x0.shape[0]}")
        train = batch_from_clean(x0[:config.n_train], t, r_train)
        val = batch_from_clean(x0[config.n_train:config.n_train + config.n_val], t, r_val)
        alpha = 1.0 if config.alpha is None else config.alpha
        beta = 1.0 if config.beta is None else config.beta
    # estimates describe the clean mixture; the score at time t needs them noised
    a, b2 = math.exp(-t), -math.expm1(-2 * t)
    alpha_t = min(a * a * alpha + b2, 1.0)
    beta_t = max(a * a * beta + b2, 1.0)

    if dedupe:
        means, covs = _unique_pairs(candidates)
    else:
        means, covs = np.asarray(candidates.means), np.asarray(candidates.covariances)
    d = means.shape[1]
    means_t = a * means
    covs_t = a * a * covs + b2 * np.eye(d)
    n_pairs = means.shape[0]

    if candidate_tuples is None:
        n_tuples = n_pairs ** k
        if n_tuples > config.max_tuples:
            raise CapExceeded(f"{n_pairs} candidates give {n_tuples} {k}-tuples "
                              f"(cap {config.max_tuples})")
        candidate_tuples = itertools.product(range(n_pairs), repeat=k)
    candidate_tuples = [tuple(c) for c in candidate_tuples]
    if partition_pairs is None:
        partition_pairs = list(enumerate_partition_pairs(k))
    partition_pairs = list(partition_pairs)
    if len(partition_pairs) > config.max_partition_pairs:
        raise CapExceeded(f"{len(partition_pairs)} partition pairs exceed cap "
                          f"{config.max_partition_pairs}")

    clip = config.clip or default_clip(train)
    fm = FeatureMap.fit(train.xt, config.degree)
    Phi = eval_features(fm, train.xt)
    weights = (np.full(k, 1.0 / k) if config.weights is None
               else np.asarray(config.weights, dtype=float))

    jobs = []
    for ci, tup in enumerate(candidate_tuples):
        for pi, pair in enumerate(partition_pairs):
            jobs.append((ci, tup, pi, pair))
    # count before doing any work
    total = 0
    grids = {}
    for ci, tup, pi, pair in jobs:
        if threshold_tables is not None:
            total += len(threshold_tables)
            continue
        cf0 = build_clustering(pair, means_t[list(tup)], covs_t[list(tup)], alpha_t, beta=beta_t)
        grid = threshold_grid(beta_t, alpha_t, d, cf0.eta, config.threshold_cap,
                              config.threshold_range)
        grids[(ci, pi)] = (cf0.eta, grid)
        total += _n_tables(pair, k, grid.shape[0])
    if total > config.max_combinations:
        raise CapExceeded(
            f"{len(candidate_tuples)} candidate tuples x {len(partition_pairs)} partition pairs "
            f"x thresholds = {total} fits (cap {config.max_combinations})")

    def run(job):
        ci, tup, pi, pair = job
        idx = list(tup)
        if threshold_tables is not None:
            eta, tables = None, [np.asarray(tt, dtype=float) for tt in threshold_tables]
        else:
            eta, grid = grids[(ci, pi)]
            tables = _threshold_tables(pair, k, grid)
        out = []
        for ti, table in enumerate(tables):
            cf = build_clustering(pair, means_t[idx], covs_t[idx], alpha_t, table, eta,
                                  beta=beta_t)
            th = default_piece_thresholds(cf, weights, alpha_t, beta_t, config.delta,
                                          config.c1, config.c2, config.spread_floor)
            labels = classify_batch(train.xt, cf)
            try:
                pieces = fit_pieces(train, cf, fm, th, config.ridge, weights, clip,
                                    features=Phi, labels=labels)
            except LinAlgError:
                continue
            model = PiecewiseScoreModel(cf, tuple(pieces), fm, float(t), weights)
            tr = clipped_loss(model, train, clip)
            vl = clipped_loss(model, val, clip)
            out.append((FitRecord(ci, pi, ti, tr, vl), model))
        return out

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    best, best_loss, report = None, math.inf, []
    for group in results:
        for rec, model in group:
            report.append(rec)
            if rec.val_loss < best_loss:
                best, best_loss = model, rec.val_loss
    if best is None:
        raise LinAlgError("no candidate combination produced a solvable fit")
    return LearnResult(best, best_loss, report, clip)


def oracle_learn(mix: GaussianMixture, t: float, config: LearnConfig,
                 rng: np.random.Generator, partition_pairs=None,
                 threshold_tables=None) -> LearnResult:
    """learn_score with the true parameters and weights as the only candidate tuple."""
    cands = CandidateList(mix.means.copy(), mix.covariances, ["oracle"] * mix.k)
    cfg = replace(config, weights=tuple(mix.weights.tolist()),
                  alpha=mix.conditioning.alpha, beta=mix.conditioning.beta)
    return learn_score(mix, t, cands, mix.k, cfg, rng,
                       candidate_tuples=[tuple(range(mix.k))],
                       partition_pairs=partition_pairs, threshold_tables=threshold_tables,
                       dedupe=False)

"""Acceptance criteria 1-10, one PASS/FAIL line each.

Lines go straight to the terminal so they show up under plain ``pytest -v``.
Two criteria cannot be met as stated; their lines print FAIL and the tests
are strict xfails, with the evidence printed as ``info`` lines.
"""

import json
import math
import time

import numpy as np
import pytest

from gmmdiffusion import io as gio
from gmmdiffusion.cli import main, preset_mixture
from gmmdiffusion.clustering import PartitionPair
from gmmdiffusion.evaluation import (correlation_bound_check, distribution_diagnostics,
                                     fourth_moment_check, score_simplification_error,
                                     score_simplification_quadrature, clustering_accuracy)
from gmmdiffusion.learning import make_denoising_batch
from gmmdiffusion.mixture import (GaussianComponent, exact_score, log_density, make_mixture,
                                  noised_mixture, sample_mixture)
from gmmdiffusion.rng import make_rng
from gmmdiffusion.sampler import SamplerConfig, build_schedule, generate_samples
from gmmdiffusion.score_model import FeatureMap, eval_features
from gmmdiffusion.spectral import topk_subspace

from conftest import random_cov, random_mixture, random_rotation

SEED = 20240601


@pytest.fixture
def say(capsys):
    def _say(line):
        with capsys.disabled():
            print("\n" + line)
    return _say


def verdict(n, ok, what, start):
    return f"{'PASS' if ok else 'FAIL'} criterion {n}: {what} [{time.perf_counter() - start:.1f}s]"


def test_c01_score_oracle(say):
    t0 = time.perf_counter()
    r = make_rng(SEED, "c1")
    worst = 0.0
    for i in range(100):
        d, k = int(r.integers(1, 5)), int(r.integers(1, 4))
        t = (0.0, 0.1, 1.0)[i % 3]
        q = noised_mixture(random_mixture(r, d, k), t)
        x = r.normal(scale=2.0, size=d)
        g = exact_score(q, x[None])[0]
        h = 1e-5
        fd = np.array([(log_density(q, (x + h * e)[None])[0] - log_density(q, (x - h * e)[None])[0]) / (2 * h)
                       for e in np.eye(d)])
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1.0)))
    ok = worst <= 1e-5 and time.perf_counter() - t0 < 5
    say(verdict(1, ok, f"worst relative FD error {worst:.2e} <= 1e-5 over 100 cases", t0))
    assert ok


def test_c02_ksvd(say):
    t0 = time.perf_counter()
    r = make_rng(SEED, "c2")
    worst_excess = -math.inf
    violations = 0
    for i in range(50):
        k = int(r.integers(1, 5))
        eps = (0.01, 0.1)[i % 2]
        V = random_rotation(r, 20)[:, :k]
        G = r.normal(size=(20, 20))
        E = G + G.T
        E *= eps / np.linalg.norm(E, 2)
        P = topk_subspace(V @ V.T + E, k).projector()
        err = float(np.max(np.sum((V - P @ V) ** 2, axis=0)))
        worst_excess = max(worst_excess, err - 2 * eps)
        violations += err > 2 * eps + 1e-9
    ok = violations == 0 and time.perf_counter() - t0 < 5
    say(verdict(2, ok, f"{violations} violations of |v - Pv|^2 <= 2 eps in 50 instances "
                       f"(max err - 2 eps = {worst_excess:.3g})", t0))
    assert ok


def test_c03_fourth_moment(say):
    t0 = time.perf_counter()
    r = make_rng(SEED, "c3")
    zs = []
    for _ in range(20):
        rep = fourth_moment_check(r.normal(size=(4, 4)), r.normal(size=4), random_cov(r, 4),
                                  1_000_000, r)
        zs.append(abs(rep.extras["z"]))
    ok = max(zs) <= 4 and time.perf_counter() - t0 < 60
    say(verdict(3, ok, f"max |z| = {max(zs):.2f} <= 4 over 20 cases at n=1e6", t0))
    assert ok


def correlation_pairs(r):
    for _ in range(20):
        d = int(r.integers(1, 4))
        u = r.normal(size=(2, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        mus = u * r.uniform(0.0, 2.5, size=(2, 1))
        yield GaussianComponent(mus[0], random_cov(r, d)), GaussianComponent(mus[1], random_cov(r, d))


@pytest.mark.xfail(strict=True, reason="the stated exponent |dmu|^2/beta decays faster than the "
                   "true overlap (about |dmu|^2/8 for unit scale); see the decisions ledger")
def test_c04_correlation_bound(say):
    t0 = time.perf_counter()
    r = make_rng(SEED, "c4")
    fails, bc_fails, worst = 0, 0, 0.0
    for a, b in correlation_pairs(r):
        rep = correlation_bound_check(a, b, 200_000, r, 0.5, 2.0)
        fails += not rep.passed
        bc_fails += rep.estimate > rep.extras["half_bhattacharyya"] + 3 * rep.std_error
        worst = max(worst, rep.estimate / rep.bound)
    ok = fails == 0 and time.perf_counter() - t0 < 60
    say(verdict(4, ok, f"{fails}/20 pairs exceed bound + 3 SE (worst estimate/bound = {worst:.3g})", t0))
    say(f"info criterion 4: {bc_fails}/20 pairs exceed (1/2) Bhattacharyya coefficient + 3 SE")
    assert ok


def pair_at(D):
    return make_mixture(np.array([[-D], [D]]), np.ones((2, 1, 1)), [0.5, 0.5])


def test_c05_score_simplification(say):
    t0 = time.perf_counter()
    vals = [score_simplification_error(pair_at(D), [0], 200_000, make_rng(SEED, "c5")).estimate
            for D in (4, 6, 8, 10)]
    ok = all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] <= 1e-6 and time.perf_counter() - t0 < 30
    say(verdict(5, ok, "components at +-D, D=4,6,8,10: " + ", ".join(f"{v:.3g}" for v in vals), t0))
    gap = [score_simplification_quadrature(pair_at(D / 2), [0]) for D in (4, 6, 8, 10)]
    say("info criterion 5: means D apart (quadrature): " + ", ".join(f"{v:.3g}" for v in gap))
    assert ok


def ols_with_se(F, Y):
    G_inv = np.linalg.inv(F.T @ F)
    B = G_inv @ F.T @ Y
    E = Y - F @ B
    se = np.empty_like(B)
    for c in range(Y.shape[1]):
        meat = (F * E[:, c:c + 1] ** 2).T @ F
        se[:, c] = np.sqrt(np.diag(G_inv @ meat @ G_inv))
    return B, se


def test_c06_denoising_equals_score_matching(say):
    t0 = time.perf_counter()
    mix = make_mixture(np.array([[0.5, -1.0]]), np.array([[[1.5, 0.4], [0.4, 0.7]]]), [1.0])
    t = 0.4
    b = make_denoising_batch(mix, t, 1_000_000, make_rng(SEED, "c6"))
    F = eval_features(FeatureMap.identity(2, 1), b.xt)
    Bd, se_d = ols_with_se(F, b.targets)
    Bo, se_o = ols_with_se(F, exact_score(noised_mixture(mix, t), b.xt))
    z = float(np.max(np.abs(Bd - Bo) / np.sqrt(se_d ** 2 + se_o ** 2)))
    ok = z <= 3 and time.perf_counter() - t0 < 60
    say(verdict(6, ok, f"max coefficient gap {z:.2f} combined SE <= 3 at n=1e6", t0))
    assert ok


def test_c07_exact_score_sampler(say):
    t0 = time.perf_counter()
    mix = preset_mixture("two-cluster-2d")
    sch = build_schedule(6.0, 0.005, 256)
    Y = generate_samples(lambda y, s: exact_score(noised_mixture(mix, s), y),
                         SamplerConfig(sch, 20_000, SEED), 2, make_rng(SEED, "c7", "sampler"))
    right = Y[:, 0] > 0
    prop = float(right.mean())
    mean_err = max(float(np.linalg.norm(Y[right].mean(0) - [3, 0])),
                   float(np.linalg.norm(Y[~right].mean(0) - [-3, 0])))
    ref = sample_mixture(mix, 20_000, make_rng(SEED, "c7", "ref")).points
    ref2 = sample_mixture(mix, 20_000, make_rng(SEED, "c7", "ref2")).points
    w1 = distribution_diagnostics(Y, ref, 64, make_rng(SEED, "c7", "proj")).estimate
    base = distribution_diagnostics(ref2, ref, 64, make_rng(SEED, "c7", "proj")).estimate
    ok = (abs(prop - 0.5) <= 0.02 and mean_err <= 0.1 and w1 <= 0.1
          and time.perf_counter() - t0 < 300)
    say(verdict(7, ok, f"proportion {prop:.4f}, mean error {mean_err:.3f}, sliced-W1 {w1:.4f} "
                       f"(self baseline {base:.4f})", t0))
    assert ok


PIPELINE = {
    "seed": SEED,
    "oracle": True,
    "mixture": {"preset": "symmetric-pair-1d"},
    "schedule": {"T": 6.0, "delta": 0.005, "N": 256},
    "sample": {"n": 10_000},
    "learn": {"degree": 6, "n_train": 200_000, "n_val": 50_000, "time_stride": 8},
    "generate": {"n_samples": 20_000},
    "eval": {"score_t": 0.1, "n_score": 100_000, "n_reference": 20_000, "n_projections": 64,
             "rel_tol": 0.05, "w1_tol": 0.1},
}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cfg = base / "config.json"
    cfg.write_text(json.dumps(PIPELINE))
    t0 = time.perf_counter()
    code = main(["pipeline", "--config", str(cfg), "--out", str(base / "run1")])
    return base, cfg, code, time.perf_counter() - t0


def test_c08_learned_pipeline(say, pipeline_run):
    base, _, code, secs = pipeline_run
    rows = {r["check"]: r for r in gio.read_report_csv(base / "run1" / "report.csv")}
    rel = float(rows["score_l2_error"]["relative"])
    w1 = float(rows["distribution"]["estimate"])
    ok = code == 0 and rel <= 0.05 and w1 <= 0.1 and secs < 600
    say(f"{'PASS' if ok else 'FAIL'} criterion 8: relative score L2 {rel:.2e} <= 0.05, sliced-W1 "
        f"{w1:.4f} <= 0.1 (self baseline {float(rows['distribution']['self_w1_baseline']):.4f}) "
        f"[{secs:.1f}s]")
    assert ok


def two_piece(mean_gap, cov_scale):
    mus = np.array([[-mean_gap / 2, 0, 0], [mean_gap / 2, 0, 0]])
    covs = np.stack([np.eye(3), cov_scale * np.eye(3)])
    return make_mixture(mus, covs, [0.5, 0.5])


@pytest.mark.xfail(strict=True, reason="oracle thresholds with E = 0 sit at the mean of the competing "
                   "covariance statistic, so about half of one component fails at any separation")
def test_c09_clustering(say):
    t0 = time.perf_counter()
    mix = two_piece(20.0, 3.0)
    pair = PartitionPair(((0,), (1,)), ((0,), (1,)))
    rep = clustering_accuracy(mix, pair, 10_000, make_rng(SEED, "c9"), "oracle")
    ok = rep.passed and time.perf_counter() - t0 < 30
    say(verdict(9, ok, f"means 20 apart, Q = I vs 3I: per-component rates "
                       f"{[round(v, 4) for v in rep.extras['rates']]} <= 0.01", t0))
    mid = clustering_accuracy(mix, pair, 10_000, make_rng(SEED, "c9"), "midpoint")
    say(f"info criterion 9: same instance, midpoint thresholds: rates "
        f"{[round(v, 4) for v in mid.extras['rates']]}")
    mean_only = two_piece(20.0, 1.0)
    rep2 = clustering_accuracy(mean_only, PartitionPair(((0,), (1,)), ((0, 1),)), 10_000,
                               make_rng(SEED, "c9"), "oracle")
    say(f"info criterion 9: means 20 apart, shared covariance: rates "
        f"{[round(v, 4) for v in rep2.extras['rates']]}")
    assert ok


def test_c10_determinism(say, pipeline_run):
    base, cfg, code, _ = pipeline_run
    t0 = time.perf_counter()
    main(["pipeline", "--config", str(cfg), "--out", str(base / "run2")])
    a, b = base / "run1", base / "run2"
    names = sorted(p.name for p in a.iterdir())
    differ = [n for n in names if not (b / n).exists() or (a / n).read_bytes() != (b / n).read_bytes()]
    ok = code == 0 and not differ and names == sorted(p.name for p in b.iterdir())
    say(verdict(10, ok, f"{len(names)} artifacts byte-identical on rerun"
                        + (f"; differing: {differ}" if differ else ""), t0))
    assert ok

"""Command-line driver: one subcommand per stage plus the end-to-end pipeline."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as gio
from .clustering import PartitionPair
from .config import OUT_ENV, ConfigError, ExperimentConfig, load_config
from .evaluation import (MCReport, clustering_accuracy, correlation_bound_check,
                         distribution_diagnostics, fourth_moment_check,
                         hanson_wright_tail_check, kl_gaussian, score_l2_error,
                         score_simplification_error)
from .learning import LearnConfig, learn_score, oracle_learn
from .mixture import (ConditioningError, GaussianMixture, exact_score, make_mixture,
                      noised_mixture, sample_mixture)
from .rng import make_rng
from .sampler import SamplerConfig, build_schedule, generate_samples
from .spectral import CandidateList, CapExceeded, EstimateConfig, crude_estimate

PRESETS = {
    "symmetric-pair-1d": dict(means=[[-4.0], [4.0]], covariances=[[[1.0]], [[1.0]]],
                              weights=[0.5, 0.5]),
    "two-cluster-2d": dict(means=[[-3.0, 0.0], [3.0, 0.0]],
                           covariances=[np.eye(2).tolist(), np.eye(2).tolist()],
                           weights=[0.5, 0.5]),
    "three-cov-3d": dict(means=[[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]],
                         covariances=[np.eye(3).tolist(),
                                      np.diag([2.0, 0.5, 1.0]).tolist(),
                                      np.diag([0.5, 1.0, 2.0]).tolist()],
                         weights=[1 / 3, 1 / 3, 1 / 3]),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception, artifacts: list[str]):
        self.stage, self.cause, self.artifacts = stage, cause, list(artifacts)
        done = ", ".join(artifacts) if artifacts else "none"
        super().__init__(f"stage '{stage}' failed: {cause} (artifacts written: {done})")


def preset_mixture(name: str) -> GaussianMixture:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    p = PRESETS[name]
    return make_mixture(np.array(p["means"]), np.array(p["covariances"]), np.array(p["weights"]))


def mixture_from_stage(stage) -> GaussianMixture:
    if stage.path is not None:
        return gio.load_mixture(stage.path)
    if stage.means is not None:
        return make_mixture(np.array(stage.means), np.array(stage.covariances),
                            np.array(stage.weights))
    return preset_mixture(stage.preset)


def conditioning_summary(mix: GaussianMixture) -> str:
    cp = mix.conditioning
    return (f"d={mix.d} k={mix.k} alpha={cp.alpha:.6g} beta={cp.beta:.6g} "
            f"R={cp.radius_R:.6g} tau={cp.tau:.6g} lambda_min={cp.lambda_min:.6g}")


def out_dir(arg: str | None, cfg_value: str | None = None) -> Path:
    p = os.environ.get(OUT_ENV) or arg or cfg_value or "."
    path = Path(p)
    path.mkdir(parents=True, exist_ok=True)
    return path


def finest_pair(mix: GaussianMixture) -> PartitionPair:
    """Distinct means in separate mean blocks, distinct covariances in separate covariance blocks."""
    def group(vals):
        blocks: list[list[int]] = []
        for i in range(mix.k):
            for b in blocks:
                if np.array_equal(vals[b[0]], vals[i]):
                    b.append(i)
                    break
            else:
                blocks.append([i])
        return tuple(tuple(b) for b in blocks)
    return PartitionPair(group(mix.means), group(mix.covariances))


# ---------------------------------------------------------------------------
# eval checks

def _check_fourth_moment(mix, rng, args):
    c = mix.components[args.component]
    A = rng.standard_normal((mix.d, mix.d))
    return [fourth_moment_check(A, c.mean, c.covariance, args.n, rng)]


def _check_correlation(mix, rng, args):
    cp = mix.conditioning
    return [correlation_bound_check(mix.components[0], mix.components[1], args.n, rng,
                                    cp.alpha, cp.beta)]


def _check_hanson_wright(mix, rng, args):
    A = mix.components[args.component].covariance
    return hanson_wright_tail_check(A, [0.5, 1.0, 2.0, 4.0], args.n, rng)


def _check_simplification(mix, rng, args):
    return [score_simplification_error(mix, [0], args.n, rng, args.tol)]


def _check_score(mix, rng, args):
    q = noised_mixture(mix, args.t)
    return [score_l2_error(lambda X: exact_score(q, X), mix, args.t, args.n, rng, args.tol)]


def _check_kl(mix, rng, args):
    a, b = mix.components[0], mix.components[-1]
    v = kl_gaussian(a, b)
    ok = args.tol is None or v <= args.tol
    return [MCReport("kl_gaussian", v, 0.0, 0, args.tol, ok, "closed form")]


def _check_clustering(mix, rng, args):
    return [clustering_accuracy(mix, finest_pair(mix), args.n, rng, args.thresholds,
                                tol=args.tol if args.tol is not None else 0.01)]


def _check_distribution(mix, rng, args):
    if not args.samples:
        raise ValueError("the distribution check needs --samples")
    X = gio.load_samples(args.samples)
    ref = sample_mixture(mix, X.shape[0], rng).points
    return [distribution_diagnostics(X, ref, 64, rng, args.tol)]


CHECKS = {
    "fourth-moment": _check_fourth_moment,
    "correlation-bound": _check_correlation,
    "hanson-wright": _check_hanson_wright,
    "score-simplification": _check_simplification,
    "score-error": _check_score,
    "kl": _check_kl,
    "clustering": _check_clustering,
    "distribution": _check_distribution,
}


def write_reports(path: Path, reports: list[MCReport], header: dict) -> bool:
    gio.write_report_csv(path, [r.row() for r in reports], header)
    return all(r.passed for r in reports)


def summary_text(reports: list[MCReport]) -> str:
    lines = []
    for r in reports:
        tag = "PASS" if r.passed else "FAIL"
        lines.append(f"{tag} {r.name}: estimate={r.estimate:.6g} bound={r.bound} ({r.criterion})")
    lines.append(f"overall: {'PASS' if all(r.passed for r in reports) else 'FAIL'}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pipeline

def learn_config(cfg: ExperimentConfig, mix: GaussianMixture | None) -> LearnConfig:
    lc = cfg.learn
    return LearnConfig(degree=lc.degree, ridge=lc.ridge, n_train=lc.n_train, n_val=lc.n_val,
                       c1=lc.c1, c2=lc.c2, delta=lc.delta, spread_floor=lc.spread_floor,
                       threshold_cap=lc.threshold_cap, threshold_range=lc.threshold_range,
                       max_tuples=lc.max_tuples, max_partition_pairs=lc.max_partition_pairs,
                       max_combinations=lc.max_combinations, seed=cfg.seed,
                       threads=cfg.threads)


def learn_times(schedule, stride: int) -> np.ndarray:
    ts = schedule.score_times()
    keep = list(range(0, ts.shape[0], stride))
    if keep[-1] != ts.shape[0] - 1:
        keep.append(ts.shape[0] - 1)
    return ts[keep]


def run_pipeline(cfg: ExperimentConfig, out: Path, config_path: Path | None = None) -> dict:
    """Sample, estimate, learn per schedule time, generate, evaluate. Returns the summary."""
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    inputs = {"config": config_path} if config_path is not None else {}
    seed = cfg.seed

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - rewrap with stage context
            raise StageError(name, exc, written) from exc

    def record(p: Path):
        written.append(str(p))
        return p

    mix = stage("gen-mixture", lambda: mixture_from_stage(cfg.mixture))
    p_mix = record(out / "mixture.json")
    gio.save_mixture(p_mix, mix, seed, inputs)

    def _sample():
        return sample_mixture(mix, cfg.sample.n, make_rng(seed, "sample-data")).points
    X = stage("sample-data", _sample)
    p_samples = record(out / "samples.csv")
    gio.save_samples_csv(p_samples, X, gio.make_header("samples", seed, {"mixture": p_mix}))

    def _estimate():
        if cfg.oracle:
            return CandidateList(mix.means.copy(), mix.covariances.copy(), ["oracle"] * mix.k)
        ec = cfg.estimate
        econf = EstimateConfig(
            mean_net_step=ec.mean_net_step, cov_net_step=ec.cov_net_step,
            cov_net_radius=ec.cov_net_radius,
            R=ec.R if ec.R is not None else mix.conditioning.radius_R,
            beta=ec.beta if ec.beta is not None else mix.conditioning.beta,
            d_cap=ec.d_cap, max_mean_candidates=ec.max_mean_candidates,
            max_tuples=ec.max_tuples, max_net_points=ec.max_net_points,
            max_candidates=ec.max_candidates)
        half = X.shape[0] // 2
        return crude_estimate(X[:half], mix.k, econf, cov_samples=X[half:])
    cands = stage("estimate", _estimate)
    p_cands = record(out / "candidates.json")
    gio.save_candidates(p_cands, cands, seed, {"samples": p_samples})

    sch = stage("schedule", lambda: build_schedule(cfg.schedule.T, cfg.schedule.delta,
                                                   cfg.schedule.N, mode=cfg.schedule.mode))
    lconf = learn_config(cfg, mix)
    times = learn_times(sch, cfg.learn.time_stride)

    def _learn_one(t, label):
        rng = make_rng(seed, "learn", label)
        if cfg.oracle:
            return oracle_learn(mix, float(t), lconf, rng)
        return learn_score(X, float(t), cands, mix.k, lconf, rng)

    def _learn():
        results = [_learn_one(t, f"step-{i}") for i, t in enumerate(times)]
        return results, _learn_one(cfg.eval.score_t, "eval-time")
    results, eval_result = stage("learn", _learn)
    p_models = record(out / "models.json")
    gio.save_time_models(p_models, [r.model for r in results], seed,
                         {"samples": p_samples, "candidates": p_cands})
    p_eval_model = record(out / "model_eval_t.json")
    gio.save_model(p_eval_model, eval_result.model, seed,
                   {"samples": p_samples, "candidates": p_cands})
    fit_rows = []
    for t, r in zip(list(times) + [cfg.eval.score_t], results + [eval_result]):
        for rec in r.report:
            fit_rows.append({"t": float(t), "candidate_id": rec.candidate_id,
                             "partition_id": rec.partition_id, "threshold_id": rec.threshold_id,
                             "train_loss": rec.train_loss, "val_loss": rec.val_loss})
    p_fit = record(out / "fit_report.csv")
    gio.write_report_csv(p_fit, fit_rows, gio.make_header("fit-report", seed, {}))

    score = gio.TimeIndexedScore([r.model for r in results])

    def _generate():
        sc = SamplerConfig(sch, cfg.generate.n_samples, seed, cfg.schedule.rho_mode)
        return generate_samples(score, sc, mix.d, make_rng(seed, "reverse-sampler"))
    Y = stage("generate", _generate)
    ext = ".gmms" if cfg.generate.format == "gmms" else ".csv"
    p_gen = record(out / f"generated{ext}")
    gio.save_samples(p_gen, Y, gio.make_header("generated", seed, {"models": p_models}))

    def _evaluate():
        ev = cfg.eval
        r1 = score_l2_error(eval_result.model, mix, ev.score_t, ev.n_score,
                            make_rng(seed, "eval", "score"), ev.rel_tol)
        ref = sample_mixture(mix, ev.n_reference, make_rng(seed, "eval", "reference")).points
        r2 = distribution_diagnostics(Y, ref, ev.n_projections,
                                      make_rng(seed, "eval", "projections"), ev.w1_tol)
        ref2 = sample_mixture(mix, ev.n_reference, make_rng(seed, "eval", "reference-2")).points
        base = distribution_diagnostics(ref2, ref, ev.n_projections,
                                        make_rng(seed, "eval", "projections"))
        r2.extras["self_w1_baseline"] = base.estimate
        return [r1, r2]
    reports = stage("evaluate", _evaluate)
    p_rep = record(out / "report.csv")
    write_reports(p_rep, reports, gio.make_header("report", seed, {"generated": p_gen}))
    p_sum = record(out / "summary.txt")
    text = summary_text(reports)
    p_sum.write_text(text, encoding="utf-8")
    return {"passed": all(r.passed for r in reports), "reports": reports,
            "artifacts": written, "summary": text}


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_mixture(args) -> int:
    if args.custom:
        doc = json.loads(Path(args.custom).read_text(encoding="utf-8"))
        mix = make_mixture(np.array(doc["means"], dtype=float),
                           np.array(doc["covariances"], dtype=float),
                           np.array(doc["weights"], dtype=float),
                           doc.get("alpha"), doc.get("beta"), doc.get("R"), doc.get("lambda_min"))
    else:
        mix = preset_mixture(args.preset)
    path = out_dir(args.out) / args.name
    gio.save_mixture(path, mix, args.seed)
    print(conditioning_summary(mix))
    print(f"wrote {path}")
    return 0


def cmd_sample_data(args) -> int:
    mix = gio.load_mixture(args.mixture)
    rng = make_rng(args.seed, "sample-data")
    X = sample_mixture(mix, args.n, rng).points
    if args.t > 0:
        X = math.exp(-args.t) * X + math.sqrt(-math.expm1(-2 * args.t)) * rng.standard_normal(X.shape)
    path = out_dir(args.out) / args.name
    gio.save_samples(path, X, gio.make_header("samples", args.seed, {"mixture": args.mixture}))
    print(f"wrote {path} ({X.shape[0]} x {X.shape[1]})")
    return 0


def cmd_estimate(args) -> int:
    X = gio.load_samples(args.samples)
    conf = EstimateConfig(mean_net_step=args.mean_net_step, cov_net_step=args.cov_net_step,
                          cov_net_radius=args.cov_net_radius, R=args.R, beta=args.beta)
    half = X.shape[0] // 2
    cands = crude_estimate(X[:half], args.k, conf, cov_samples=X[half:])
    path = out_dir(args.out) / args.name
    gio.save_candidates(path, cands, args.seed, {"samples": args.samples})
    print(f"{len(cands)} candidates; wrote {path}")
    return 0


def cmd_cluster_test(args) -> int:
    mix = gio.load_mixture(args.mixture)
    rep = clustering_accuracy(mix, finest_pair(mix), args.n, make_rng(args.seed, "cluster-test"),
                              args.thresholds, args.slack, args.tol)
    path = out_dir(args.out) / args.name
    ok = write_reports(path, [rep], gio.make_header("report", args.seed, {"mixture": args.mixture}))
    print(summary_text([rep]), end="")
    return 0 if ok else 1


def cmd_learn(args) -> int:
    mix = gio.load_mixture(args.mixture)
    conf = LearnConfig(degree=args.degree, n_train=args.n_train, n_val=args.n_val,
                       seed=args.seed, threads=args.threads)
    rng = make_rng(args.seed, "learn", f"t={args.t!r}")
    if args.oracle or not args.candidates:
        res = oracle_learn(mix, args.t, conf, rng)
    else:
        res = learn_score(mix, args.t, gio.load_candidates(args.candidates), mix.k, conf, rng)
    d = out_dir(args.out)
    gio.save_model(d / args.name, res.model, args.seed, {"mixture": args.mixture})
    gio.write_report_csv(d / (Path(args.name).stem + "_fit.csv"),
                         [vars(r) for r in res.report], gio.make_header("fit-report", args.seed))
    print(f"val_loss={res.val_loss:.6g}; wrote {d / args.name}")
    return 0


def cmd_generate(args) -> int:
    sch = build_schedule(args.T, args.delta, args.N, mode=args.schedule_mode)
    if args.models:
        score = gio.load_time_models(args.models)
        d = score.models[0].feature_map.d
        src = {"models": args.models}
    elif args.mixture and args.oracle:
        mix = gio.load_mixture(args.mixture)
        score = lambda y, t: exact_score(noised_mixture(mix, t), y)  # noqa: E731
        d = mix.d
        src = {"mixture": args.mixture}
    else:
        raise ValueError("generate needs --models, or --mixture with --oracle")
    Y = generate_samples(score, SamplerConfig(sch, args.n, args.seed, args.rho_mode), d,
                         make_rng(args.seed, "reverse-sampler"))
    path = out_dir(args.out) / args.name
    gio.save_samples(path, Y, gio.make_header("generated", args.seed, src))
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    if args.check not in CHECKS:
        raise UsageError(f"unknown check {args.check!r}; available: {', '.join(CHECKS)}")
    mix = gio.load_mixture(args.mixture) if args.mixture else preset_mixture(args.preset)
    reports = CHECKS[args.check](mix, make_rng(args.seed, "eval", args.check), args)
    path = out_dir(args.out) / args.name
    inputs = {"mixture": args.mixture} if args.mixture else {}
    ok = write_reports(path, reports, gio.make_header("report", args.seed, inputs))
    print(summary_text(reports), end="")
    return 0 if ok else 1


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.oracle:
        updates["oracle"] = True
    if args.threads is not None:
        updates["threads"] = args.threads
    if updates:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **updates})
    out = out_dir(args.out, cfg.out_dir)
    res = run_pipeline(cfg, out, Path(args.config))
    print(res["summary"], end="")
    return 0 if res["passed"] else 1


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmmdiffusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, default_name):
        sp.add_argument("--seed", type=int, default=0, help="root seed (u64)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--name", default=default_name, help="output file name")
        sp.add_argument("--threads", type=int, default=1)

    g = sub.add_parser("gen-mixture", help="write a validated mixture file")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--custom", help="JSON with means, covariances, weights (custom)")
    common(g, "mixture.json")
    g.set_defaults(func=cmd_gen_mixture)

    s = sub.add_parser("sample-data", help="draw samples from a mixture")
    s.add_argument("--mixture", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=float, default=0.0, help="noise to forward time t")
    common(s, "samples.csv")
    s.set_defaults(func=cmd_sample_data)

    e = sub.add_parser("estimate", help="crude parameter candidates from samples")
    e.add_argument("--samples", required=True)
    e.add_argument("--k", type=int, required=True)
    e.add_argument("--R", type=float, required=True)
    e.add_argument("--beta", type=float, required=True)
    e.add_argument("--mean-net-step", type=float, default=1.0)
    e.add_argument("--cov-net-step", type=float, default=None)
    e.add_argument("--cov-net-radius", type=float, default=None)
    common(e, "candidates.json")
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("cluster-test", help="clustering accuracy with true parameters")
    c.add_argument("--mixture", required=True)
    c.add_argument("--n", type=int, default=10_000)
    c.add_argument("--thresholds", choices=["oracle", "midpoint"], default="oracle")
    c.add_argument("--slack", type=float, default=0.0)
    c.add_argument("--tol", type=float, default=0.01)
    common(c, "cluster_report.csv")
    c.set_defaults(func=cmd_cluster_test)

    lp = sub.add_parser("learn", help="fit a piecewise-polynomial score at one time")
    lp.add_argument("--mixture", required=True)
    lp.add_argument("--candidates", default=None)
    lp.add_argument("--t", type=float, required=True)
    lp.add_argument("--degree", type=int, default=6)
    lp.add_argument("--n-train", type=int, default=200_000)
    lp.add_argument("--n-val", type=int, default=50_000)
    lp.add_argument("--oracle", action="store_true", help="use the true parameters")
    common(lp, "model.json")
    lp.set_defaults(func=cmd_learn)

    gn = sub.add_parser("generate", help="run the reverse sampler")
    gn.add_argument("--models", default=None, help="time-indexed score models")
    gn.add_argument("--mixture", default=None)
    gn.add_argument("--oracle", action="store_true", help="use the exact score of --mixture")
    gn.add_argument("--T", type=float, default=6.0)
    gn.add_argument("--delta", type=float, default=0.005)
    gn.add_argument("--N", type=int, default=256)
    gn.add_argument("--schedule-mode", choices=["geometric", "literal"], default="geometric")
    gn.add_argument("--rho-mode", choices=["full", "half"], default="full")
    gn.add_argument("--n", type=int, default=20_000)
    common(gn, "generated.gmms")
    gn.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help=f"run a check: {', '.join(CHECKS)}")
    ev.add_argument("check")
    ev.add_argument("--mixture", default=None)
    ev.add_argument("--preset", default="two-cluster-2d")
    ev.add_argument("--samples", default=None)
    ev.add_argument("--n", type=int, default=100_000)
    ev.add_argument("--t", type=float, default=0.1)
    ev.add_argument("--component", type=int, default=0)
    ev.add_argument("--tol", type=float, default=None)
    ev.add_argument("--thresholds", choices=["oracle", "midpoint"], default="oracle")
    common(ev, "report.csv")
    ev.set_defaults(func=cmd_eval)

    pp = sub.add_parser("pipeline", help="run every stage from a config file")
    pp.add_argument("--config", required=True)
    pp.add_argument("--seed", type=int, default=None)
    pp.add_argument("--out", default=None)
    pp.add_argument("--oracle", action="store_true")
    pp.add_argument("--threads", type=int, default=None)
    pp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        parser.error("--seed must be an unsigned 64-bit integer")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ConditioningError, CapExceeded, gio.FormatError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

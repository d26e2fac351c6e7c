"""Experiment configuration: one flat document per run, validated on load."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

OUT_ENV = "GMMDIFFUSION_OUT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MixtureStage(_Strict):
    preset: Optional[str] = None
    path: Optional[str] = None
    means: Optional[list[list[float]]] = None
    covariances: Optional[list[list[list[float]]]] = None
    weights: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_source(self):
        given = [self.preset is not None and self.preset != "custom", self.path is not None,
                 self.means is not None]
        if sum(given) != 1:
            raise ValueError("mixture needs exactly one of: preset, path, or custom means/covariances/weights")
        if self.means is not None and (self.covariances is None or self.weights is None):
            raise ValueError("custom mixture needs means, covariances and weights")
        return self


class SampleStage(_Strict):
    n: int = Field(250_000, ge=1)


class EstimateStage(_Strict):
    mean_net_step: float = Field(1.0, gt=0)
    cov_net_step: Optional[float] = Field(None, gt=0)
    cov_net_radius: Optional[float] = Field(None, gt=0)
    R: Optional[float] = None
    beta: Optional[float] = None
    d_cap: int = 8
    max_mean_candidates: int = 10_000
    max_tuples: int = 10_000
    max_net_points: int = 100_000
    max_candidates: int = 1_000_000


class ScheduleStage(_Strict):
    T: float = Field(gt=1)
    delta: float = Field(gt=0, lt=1)
    N: int = Field(ge=4)
    mode: Literal["geometric", "literal"] = "geometric"
    rho_mode: Literal["full", "half"] = "full"


class LearnStage(_Strict):
    degree: int = Field(6, ge=0)
    ridge: float = Field(1e-8, ge=0)
    n_train: int = Field(200_000, ge=1)
    n_val: int = Field(50_000, ge=1)
    c1: float = 8.0
    c2: float = 8.0
    delta: float = 0.01
    spread_floor: float = 1.0
    threshold_cap: int = 3
    threshold_range: float = 2.0
    max_tuples: int = 10_000
    max_partition_pairs: int = 2704
    max_combinations: int = 20_000
    time_stride: int = Field(1, ge=1)


class GenerateStage(_Strict):
    n_samples: int = Field(20_000, ge=1)
    format: Literal["csv", "gmms"] = "gmms"


class EvalStage(_Strict):
    score_t: float = Field(0.1, gt=0)
    n_score: int = Field(100_000, ge=2)
    n_reference: int = Field(20_000, ge=1)
    n_projections: int = Field(64, ge=1)
    rel_tol: Optional[float] = 0.05
    w1_tol: Optional[float] = 0.1


class ExperimentConfig(_Strict):
    seed: int = Field(ge=0, lt=2 ** 64)
    mixture: MixtureStage
    schedule: ScheduleStage
    out_dir: Optional[str] = None
    oracle: bool = False
    threads: int = Field(1, ge=1)
    sample: SampleStage = SampleStage()
    estimate: EstimateStage = EstimateStage()
    learn: LearnStage = LearnStage()
    generate: GenerateStage = GenerateStage()
    eval: EvalStage = EvalStage()


class ConfigError(ValueError):
    pass


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "missing":
            parts.append(f"missing field '{loc}'")
        else:
            parts.append(f"field '{loc}': {err['msg']}")
    return "; ".join(parts)


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_describe(exc)}") from None
    if cfg.mixture.path is not None:
        p = Path(cfg.mixture.path)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"invalid config: field 'mixture.path': {p} does not exist")
        cfg = cfg.model_copy(update={"mixture": cfg.mixture.model_copy(update={"path": str(p)})})
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(doc, path.parent)

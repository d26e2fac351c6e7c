"""Persistence for mixtures, candidates, score models, samples and reports.

Structured documents are JSON. Python's float repr is the shortest string
that round-trips, so finite doubles survive a save/load cycle bit-exactly.
Every document carries a header with the tool version, the seed and the
sha256 of its inputs; there are no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .clustering import ClusteringFunction, PartitionPair, Refinement
from .mixture import ConditioningParams, GaussianComponent, GaussianMixture
from .score_model import FeatureMap, PieceModel, PiecewiseScoreModel
from .spectral import CandidateList, span_basis

TOOL_VERSION = "0.1.0"
GMMS_MAGIC = b"GMMS"


class FormatError(ValueError):
    """A file does not match the expected layout."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_header(kind: str, seed: int | None, inputs: dict | None = None) -> dict:
    hashes = {}
    for name, path in sorted((inputs or {}).items()):
        hashes[name] = sha256_file(path)
    return {"kind": kind, "tool_version": TOOL_VERSION, "seed": seed, "inputs": hashes}


def _dump(path, doc: dict) -> None:
    text = json.dumps(doc, indent=1, sort_keys=False, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _load(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid document ({exc})") from None
    got = doc.get("header", {}).get("kind")
    if got != kind:
        raise FormatError(f"{path}: expected a {kind} document, found {got!r}")
    return doc


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise FormatError(f"{where}: missing field {key!r}")
    return doc[key]


# ---------------------------------------------------------------------------
# mixtures

def mixture_to_dict(mix: GaussianMixture) -> dict:
    cp = mix.conditioning
    return {
        "d": mix.d,
        "k": mix.k,
        "weights": mix.weights.tolist(),
        "components": [{"mean": c.mean.tolist(), "covariance": c.covariance.tolist()}
                       for c in mix.components],
        "conditioning": {"alpha": cp.alpha, "beta": cp.beta, "R": cp.radius_R,
                         "lambda_min": cp.lambda_min},
    }


def mixture_from_dict(doc: dict) -> GaussianMixture:
    d = int(_require(doc, "d", "mixture"))
    k = int(_require(doc, "k", "mixture"))
    comps_raw = _require(doc, "components", "mixture")
    if len(comps_raw) != k:
        raise FormatError(f"mixture: k={k} but {len(comps_raw)} components listed")
    comps = []
    for i, c in enumerate(comps_raw):
        mean = np.asarray(_require(c, "mean", f"component {i}"), dtype=float)
        cov = np.asarray(_require(c, "covariance", f"component {i}"), dtype=float)
        if mean.shape != (d,) or cov.shape != (d, d):
            raise FormatError(f"component {i}: shapes {mean.shape}, {cov.shape} do not match d={d}")
        comps.append(GaussianComponent(mean, cov))
    cond = _require(doc, "conditioning", "mixture")
    cp = ConditioningParams(alpha=float(cond["alpha"]), beta=float(cond["beta"]),
                            radius_R=float(cond["R"]),
                            lambda_min=float(cond.get("lambda_min", 0.0)))
    return GaussianMixture(comps, _require(doc, "weights", "mixture"), cp)


def save_mixture(path, mix: GaussianMixture, seed: int | None = None, inputs=None) -> None:
    _dump(path, {"header": make_header("mixture", seed, inputs), **mixture_to_dict(mix)})


def load_mixture(path) -> GaussianMixture:
    return mixture_from_dict(_load(path, "mixture"))


# ---------------------------------------------------------------------------
# candidate lists

def save_candidates(path, cands: CandidateList, seed: int | None = None, inputs=None) -> None:
    d = None
    if cands.means is not None:
        d = cands.means.shape[1]
    elif cands.covariances is not None:
        d = cands.covariances.shape[1]
    doc = {
        "header": make_header("candidates", seed, inputs),
        "d": d,
        "n": len(cands),
        "means": None if cands.means is None else np.asarray(cands.means).tolist(),
        "covariances": None if cands.covariances is None else np.asarray(cands.covariances).tolist(),
        "provenance": list(cands.provenance),
    }
    _dump(path, doc)


def load_candidates(path) -> CandidateList:
    doc = _load(path, "candidates")
    d = doc.get("d")
    means = doc.get("means")
    covs = doc.get("covariances")
    means = None if means is None else np.asarray(means, dtype=float).reshape(-1, d)
    covs = None if covs is None else np.asarray(covs, dtype=float).reshape(-1, d, d)
    return CandidateList(means, covs, list(doc.get("provenance", [])))


# ---------------------------------------------------------------------------
# score models

def model_to_dict(model: PiecewiseScoreModel) -> dict:
    cf = model.clustering
    fm = model.feature_map
    return {
        "t": model.t,
        "feature_map": {"degree": fm.degree, "d": fm.d, "order": "graded-lex",
                        "shift": fm.shift.tolist(), "scale": fm.scale.tolist()},
        "weights": np.asarray(model.weights).tolist(),
        "clustering": {
            "mean_partition": [list(b) for b in cf.pair.mean_partition],
            "cov_partition": [list(b) for b in cf.pair.cov_partition],
            "means": cf.means.tolist(),
            "covariances": cf.covariances.tolist(),
            "inverses": cf.inverses.tolist(),
            "thresholds": cf.thresholds.tolist(),
            "eta": cf.eta,
        },
        "pieces": [{
            "index": p.piece_index,
            "U": list(p.members),
            "anchor": p.anchor,
            "theta1": p.theta1,
            "theta2": p.theta2,
            "coefficients": p.coefficients.tolist(),
            "fallback": {"mean": p.fallback_mean.tolist(), "inverse": p.fallback_inverse.tolist()},
        } for p in model.pieces],
    }


def model_from_dict(doc: dict) -> PiecewiseScoreModel:
    fmd = _require(doc, "feature_map", "model")
    fm = FeatureMap(int(fmd["degree"]), int(fmd["d"]), np.asarray(fmd["shift"]),
                    np.asarray(fmd["scale"]))
    c = _require(doc, "clustering", "model")
    pair = PartitionPair(tuple(tuple(b) for b in c["mean_partition"]),
                         tuple(tuple(b) for b in c["cov_partition"]))
    means = np.asarray(c["means"], dtype=float).reshape(-1, fm.d)
    cf = ClusteringFunction(pair, Refinement.of(pair), means,
                            np.asarray(c["covariances"], dtype=float).reshape(-1, fm.d, fm.d),
                            np.asarray(c["inverses"], dtype=float).reshape(-1, fm.d, fm.d),
                            np.asarray(c["thresholds"], dtype=float),
                            float(c["eta"]), span_basis(means))
    pieces = []
    for p in _require(doc, "pieces", "model"):
        pieces.append(PieceModel(
            int(p["index"]), tuple(p["U"]), int(p["anchor"]),
            np.asarray(p["coefficients"], dtype=float).reshape(fm.n_features, fm.d),
            float(p["theta1"]), float(p["theta2"]),
            np.asarray(p["fallback"]["inverse"], dtype=float).reshape(fm.d, fm.d),
            np.asarray(p["fallback"]["mean"], dtype=float).reshape(fm.d)))
    return PiecewiseScoreModel(cf, tuple(pieces), fm, float(doc["t"]),
                               np.asarray(doc["weights"], dtype=float))


def save_model(path, model: PiecewiseScoreModel, seed: int | None = None, inputs=None) -> None:
    _dump(path, {"header": make_header("score-model", seed, inputs), **model_to_dict(model)})


def load_model(path) -> PiecewiseScoreModel:
    return model_from_dict(_load(path, "score-model"))


class TimeIndexedScore:
    """Score models at a grid of forward times; a query uses the nearest time."""

    def __init__(self, models):
        self.models = sorted(models, key=lambda m: m.t)
        self.times = np.array([m.t for m in self.models])

    def model_at(self, t: float) -> PiecewiseScoreModel:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.models[i]

    def __call__(self, y, t: float):
        return self.model_at(t)(y)


def save_time_models(path, models, seed: int | None = None, inputs=None) -> None:
    _dump(path, {"header": make_header("score-models", seed, inputs),
                 "models": [model_to_dict(m) for m in models]})


def load_time_models(path) -> TimeIndexedScore:
    doc = _load(path, "score-models")
    return TimeIndexedScore([model_from_dict(m) for m in doc["models"]])


# ---------------------------------------------------------------------------
# samples

def save_samples_csv(path, X, header: dict | None = None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_samples_csv(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise FormatError(f"{path}: no sample rows")
    return np.array(rows, dtype=float)


def save_samples_gmms(path, X) -> None:
    """Binary: b"GMMS", u32 d, u64 n, then n*d little-endian float64 row-major."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    n, d = X.shape
    with open(path, "wb") as fh:
        fh.write(GMMS_MAGIC)
        fh.write(struct.pack("<IQ", d, n))
        fh.write(X.astype("<f8").tobytes())


def load_samples_gmms(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != GMMS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    d, n = struct.unpack("<IQ", data[4:16])
    body = data[16:]
    if len(body) != 8 * n * d:
        raise FormatError(f"{path}: expected {n}x{d} doubles, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(float)


def save_samples(path, X, header: dict | None = None) -> None:
    if str(path).endswith(".gmms"):
        save_samples_gmms(path, X)
        if header is not None:
            _dump(str(path) + ".meta.json", {"header": header})
    else:
        save_samples_csv(path, X, header)


def load_samples(path) -> np.ndarray:
    return load_samples_gmms(path) if str(path).endswith(".gmms") else load_samples_csv(path)


# ---------------------------------------------------------------------------
# reports

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return "" if v is None else str(v)


def write_report_csv(path, rows: list[dict], header: dict | None = None) -> None:
    cols: list[str] = []
    for r in rows:
        for key in r:
            if key not in cols:
                cols.append(key)
    buf = _io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))

"""Correlation and error metrics between predicted and subjective scores."""
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import backend
from .errors import InputError, UndefinedMetricError

MEDIAN_CONVENTION = "lower"


def _pair(preds, labels):
    x = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.size} predictions vs {y.size} labels")
    if x.size < 2:
        raise UndefinedMetricError("need at least two samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputError("non-finite values")
    return x, y


def _require_variation(x, y, name):
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError(f"{name} is undefined for constant input")


def average_ranks(x):
    """1-based ranks with ties replaced by the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # boundaries of runs of equal values in the sorted array
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    return ranks


def _pearson(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return min(1.0, max(-1.0, r))


def plcc(preds, labels):
    """Pearson linear correlation (no logistic remapping)."""
    x, y = _pair(preds, labels)
    _require_variation(x, y, "PLCC")
    return _pearson(x, y)


def srcc(preds, labels):
    """Spearman rank correlation with average ranks for ties."""
    x, y = _pair(preds, labels)
    _require_variation(x, y, "SRCC")
    return _pearson(average_ranks(x), average_ranks(y))


def krcc(preds, labels):
    """Kendall tau-b."""
    x, y = _pair(preds, labels)
    _require_variation(x, y, "KRCC")
    s, tx, ty = backend.kendall_counts(x, y)
    n0 = len(x) * (len(x) - 1) // 2
    tau = s / math.sqrt((n0 - tx) * (n0 - ty))
    return min(1.0, max(-1.0, tau))


def rmse(preds, labels):
    x, y = _pair(preds, labels)
    return float(np.sqrt(np.mean((x - y) ** 2)))


@dataclass
class MetricsReport:
    srcc: Optional[float]
    plcc: Optional[float]
    krcc: Optional[float]
    rmse: float
    n: int
    meta: Dict = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)

    METRICS = ("srcc", "plcc", "krcc", "rmse")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in ("srcc", "plcc", "krcc", "rmse", "n")},
                   meta=dict(d.get("meta") or {}), errors=dict(d.get("errors") or {}))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def summary(self):
        def f(v):
            return "undefined" if v is None else f"{v:.4f}"

        return f"SRCC {f(self.srcc)}  PLCC {f(self.plcc)}  KRCC {f(self.krcc)}  RMSE {f(self.rmse)}  (n={self.n})"


def compute_report(preds, labels, **meta) -> MetricsReport:
    """All four metrics; correlations that are undefined are recorded in ``errors``."""
    x, y = _pair(preds, labels)
    values, errors = {}, {}
    for name, fn in (("srcc", srcc), ("plcc", plcc), ("krcc", krcc)):
        try:
            values[name] = fn(x, y)
        except UndefinedMetricError as exc:
            values[name] = None
            errors[name] = str(exc)
    return MetricsReport(values["srcc"], values["plcc"], values["krcc"], rmse(x, y), len(x), dict(meta), errors)


def lower_median(values):
    v = sorted(values)
    if not v:
        raise InputError("median of an empty list")
    return v[(len(v) - 1) // 2]


def aggregate_runs(reports: List[MetricsReport]) -> MetricsReport:
    """Per-metric lower median across runs; undefined values are skipped."""
    if not reports:
        raise InputError("no reports to aggregate")
    if len(reports) == 1:
        return reports[0]
    out = {}
    errors = {}
    for name in MetricsReport.METRICS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out[name] = lower_median(vals)
        else:
            out[name] = None
            errors[name] = "undefined in every run"
    meta = {"aggregate": "median", "median_convention": MEDIAN_CONVENTION, "runs": len(reports),
            "run_ids": [r.meta.get("run_id") for r in reports]}
    n = lower_median([r.n for r in reports])
    return MetricsReport(out["srcc"], out["plcc"], out["krcc"], out["rmse"], n, meta, errors)

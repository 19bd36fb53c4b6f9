"""Fold metrics and the paired comparison test.

The t-test p-value is computed in-process via the regularized incomplete
beta function (modified Lentz continued fraction) so the package carries
no statistics dependency at runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateDifferences,
    EmptyInput,
    LengthMismatch,
    OneClassOnly,
    TooFewFolds,
)
from .explain import HeatScoreResult, heat_score_aggregate

__all__ = [
    "FoldMetrics",
    "ExperimentReport",
    "TTestResult",
    "accuracy",
    "roc_auc",
    "paired_t_test",
    "summarize_runs",
    "format_mean_std",
    "write_report",
    "REPORT_HEADER",
]

REPORT_HEADER = "model,tl,modality,acc_mean,acc_std,roc_mean,roc_std,heat_score"


def accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise LengthMismatch(f"{labels.shape} labels vs {predictions.shape} predictions")
    if labels.size == 0:
        raise EmptyInput("no predictions to score")
    return float((labels == predictions).mean())


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted one half. Computed via tie-averaged ranks."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise LengthMismatch(f"{labels.shape} labels vs {scores.shape} scores")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[labels == 1].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- regularized incomplete beta ---------------------------------------------

_BETA_EPS = 1e-10
_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


class TTestResult(NamedTuple):
    t: float
    p: float
    df: int


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on a - b; sample sd, df = n - 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise EmptyInput(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateDifferences("paired differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    df = n - 1
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, p=p, df=df)


# -- fold aggregation ---------------------------------------------------------

@dataclass
class FoldMetrics:
    fold: int
    accuracy: float
    roc_auc: float
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    heat: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    model: str
    tl: str
    modality: str
    acc_mean: float
    acc_std: float
    roc_mean: float
    roc_std: float
    heat_score: float

    def csv_row(self) -> str:
        nums = (self.acc_mean, self.acc_std, self.roc_mean, self.roc_std, self.heat_score)
        return ",".join([self.model, self.tl, self.modality]
                        + [format(v, ".6f") for v in nums])


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def summarize_runs(
    folds: list[FoldMetrics],
    model: str = "resnet18",
    tl: str = "none",
    modality: str = "phantom",
) -> ExperimentReport:
    """Sample mean/std of accuracy and ROC across folds, plus the pooled
    mean of every per-scan heat score; nan when no fold produced one."""
    if len(folds) < 2:
        raise TooFewFolds(f"need at least 2 folds for a std, got {len(folds)}")
    accs = np.array([f.accuracy for f in folds], dtype=np.float64)
    rocs = np.array([f.roc_auc for f in folds], dtype=np.float64)
    pooled: list[HeatScoreResult] = [h for f in folds for h in f.heat]
    hs = heat_score_aggregate(pooled) if pooled else math.nan
    return ExperimentReport(
        model=model,
        tl=tl,
        modality=modality,
        acc_mean=float(accs.mean()),
        acc_std=float(accs.std(ddof=1)),
        roc_mean=float(rocs.mean()),
        roc_std=float(rocs.std(ddof=1)),
        heat_score=hs,
    )


def write_report(reports: list[ExperimentReport], path: str | Path) -> None:
    lines = [REPORT_HEADER] + [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

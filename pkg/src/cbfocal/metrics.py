"""Ranking metrics for imbalanced multilabel evaluation.

Scores sharing a value are processed as one threshold group, so both AUROC
and average precision are independent of input order.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredColumn:
    scores: np.ndarray
    labels: np.ndarray
    pattern_name: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _threshold_groups(col: ScoredColumn):
    """Cumulative (tp, fp) after each distinct threshold, descending, plus thresholds."""
    order = np.argsort(-col.scores, kind="mergesort")
    s = col.scores[order]
    y = col.labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp, s[last]


def roc_curve(col: ScoredColumn):
    """(fpr, tpr, thresholds) starting at the origin."""
    p, n = col.positives, col.negatives
    if p == 0 or n == 0:
        raise UndefinedMetricError(f"AUROC undefined for {col.pattern_name or 'column'}: single-class labels")
    tp, fp, thr = _threshold_groups(col)
    tpr = np.r_[0.0, tp / p]
    fpr = np.r_[0.0, fp / n]
    return fpr, tpr, np.r_[np.inf, thr]


def auroc(col: ScoredColumn) -> float:
    fpr, tpr, _ = roc_curve(col)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def pr_curve(col: ScoredColumn):
    """(thresholds, precision, recall) at each distinct score, descending."""
    p = col.positives
    if p == 0:
        raise UndefinedMetricError(f"AU-PRC undefined for {col.pattern_name or 'column'}: no positives")
    tp, fp, thr = _threshold_groups(col)
    return thr, tp / (tp + fp), tp / p


def auprc(col: ScoredColumn) -> float:
    """Average precision: recall increments weighted by precision at each threshold group."""
    _, precision, recall = pr_curve(col)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def baseline_auprc(positives: int, negatives: int) -> float:
    if positives < 0 or negatives < 0:
        raise ValueError("counts must be non-negative")
    if positives + negatives < 1:
        raise ValueError("baseline AU-PRC needs at least one sample")
    return positives / (positives + negatives)


@dataclass
class PatternMetrics:
    pattern: str
    positives: int
    negatives: int
    baseline_auprc: float
    auprc: float = math.nan
    auroc: float = math.nan

    @property
    def defined(self) -> bool:
        return not (math.isnan(self.auroc) or math.isnan(self.auprc))


@dataclass
class EvalReport:
    patterns: list[PatternMetrics]
    macro_auroc: float = math.nan
    macro_auprc: float = math.nan
    macro_baseline_auprc: float = math.nan
    undefined: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        return report_to_csv(self)

    def by_name(self) -> dict[str, PatternMetrics]:
        return {m.pattern: m for m in self.patterns}


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def build_report(columns: Sequence[ScoredColumn]) -> EvalReport:
    if not columns:
        raise ValueError("build_report needs at least one column")
    rows = []
    undefined = []
    for i, col in enumerate(columns):
        name = col.pattern_name or f"class_{i}"
        m = PatternMetrics(name, col.positives, col.negatives,
                           baseline_auprc(col.positives, col.negatives))
        try:
            m.auroc = auroc(col)
            m.auprc = auprc(col)
        except UndefinedMetricError:
            m.auroc = m.auprc = math.nan
            undefined.append(name)
        rows.append(m)
    if undefined:
        warnings.warn(f"metrics undefined (excluded from macro average) for: {', '.join(undefined)}",
                      stacklevel=2)
    ok = [m for m in rows if m.defined]
    return EvalReport(rows,
                      macro_auroc=_mean([m.auroc for m in ok]),
                      macro_auprc=_mean([m.auprc for m in ok]),
                      macro_baseline_auprc=_mean([m.baseline_auprc for m in rows]),
                      undefined=undefined)


def report_from_arrays(probs: np.ndarray, labels: np.ndarray,
                       pattern_names: Sequence[str]) -> EvalReport:
    cols = [ScoredColumn(probs[:, k], labels[:, k], name) for k, name in enumerate(pattern_names)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = build_report(cols)
    if report.undefined:
        log.warning("metrics undefined for %s", ", ".join(report.undefined))
    return report


def macro_auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUROC over the columns where it is defined (nan if none)."""
    vals = []
    for k in range(labels.shape[1]):
        col = ScoredColumn(probs[:, k], labels[:, k])
        if 0 < col.positives < col.labels.size:
            vals.append(auroc(col))
    return _mean(vals)


REPORT_HEADER = ("pattern", "positives", "negatives", "baseline_auprc", "auprc", "auroc")


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for m in report.patterns:
        w.writerow([m.pattern, m.positives, m.negatives, _fmt(m.baseline_auprc),
                    _fmt(m.auprc), _fmt(m.auroc)])
    w.writerow(["AVERAGE", "", "", _fmt(report.macro_baseline_auprc),
                _fmt(report.macro_auprc), _fmt(report.macro_auroc)])
    return buf.getvalue()


def read_report_csv(text: str) -> dict[str, dict[str, float]]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[row["pattern"]] = {k: float(row[k]) for k in ("baseline_auprc", "auprc", "auroc")}
        for k in ("positives", "negatives"):
            if row[k]:
                out[row["pattern"]][k] = int(row[k])
    return out


def roc_curve_csv(col: ScoredColumn) -> str:
    fpr, tpr, _ = roc_curve(col)
    lines = ["fpr,tpr"] + [f"{a!r},{b!r}" for a, b in zip(fpr.tolist(), tpr.tolist())]
    return "\n".join(lines) + "\n"


def pr_curve_csv(col: ScoredColumn) -> str:
    thr, precision, recall = pr_curve(col)
    lines = ["threshold,precision,recall"] + [
        f"{t!r},{p!r},{r!r}" for t, p, r in zip(thr.tolist(), precision.tolist(), recall.tolist())
    ]
    return "\n".join(lines) + "\n"

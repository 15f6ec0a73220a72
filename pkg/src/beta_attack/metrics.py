"""Detection and robustness metrics: precision, recall, F1, AUC-PR and FTA."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .artifacts import atomic_write
from .errors import ConfigError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_decisions(cls, decisions, labels) -> "ConfusionCounts":
        d = np.asarray(decisions, dtype=bool).ravel()
        y = np.asarray(labels, dtype=bool).ravel()
        if d.shape != y.shape:
            raise ConfigError("decisions and labels differ in size")
        return cls(int((d & y).sum()), int((d & ~y).sum()), int((~d & y).sum()), int((~d & ~y).sum()))


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    area: float


def pr_curve(scores, labels) -> PrCurve:
    """Precision/recall at every distinct score used as an inclusive threshold.

    Points are ordered by decreasing threshold (recall non-decreasing). The
    curve starts at recall 0 with the precision of the first point, and the
    area is the trapezoidal integral over recall.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ConfigError("scores and labels differ in size")
    P = int(y.sum())
    if P == 0:
        raise UndefinedMetricError("AUC-PR is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of every block of equal scores: all tied items flip together
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    rec = tp[last] / P
    prec = tp[last] / (tp[last] + fp[last])
    r = np.r_[0.0, rec]
    p = np.r_[prec[0], prec]
    area = float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))
    return PrCurve(rec, prec, s_sorted[last], area)


def auc_pr(scores, labels) -> float:
    return pr_curve(scores, labels).area


def fta(decisions, ground_truth) -> float:
    """Fraction of (target, step) decisions that match the ground truth (pooled)."""
    d = np.asarray(decisions, dtype=bool).ravel()
    y = np.asarray(ground_truth, dtype=bool).ravel()
    if d.shape != y.shape:
        raise ConfigError("decisions and ground truth differ in size")
    if d.size == 0:
        raise UndefinedMetricError("FTA of an empty evaluation set")
    return float(np.mean(d == y))


RESULT_FIELDS = ("strategy", "dataset", "budget", "seed", "f1", "auc_pr", "fta", "threshold")


def results_csv(rows: Iterable[dict], fields: Sequence[str] = RESULT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return buf.getvalue()


def write_results(path: str | Path, rows: Iterable[dict], fields: Sequence[str] = RESULT_FIELDS) -> None:
    atomic_write(path, results_csv(rows, fields))

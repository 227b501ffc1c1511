"""Sufficiency gaps, subgroup performance, head distance and the group/label Pearson diagnostic."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_POINTS = 33


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    group: np.ndarray
    y_true: np.ndarray
    y_score: np.ndarray
    task: str = "regression"

    def __post_init__(self):
        g = np.asarray(self.group).reshape(-1).astype(np.int64)
        y = np.asarray(self.y_true, dtype=np.float64).reshape(-1)
        s = np.asarray(self.y_score, dtype=np.float64).reshape(-1)
        if not (g.size == y.size == s.size):
            raise MetricError("group, y_true and y_score must have equal length")
        if not np.all(np.isin(g, (0, 1))):
            raise MetricError("group must be 0 or 1")
        if self.task not in ("regression", "binary_classification"):
            raise MetricError(f"unknown task {self.task!r}")
        if self.task == "binary_classification" and not np.all(np.isin(y, (-1.0, 1.0))):
            raise MetricError("classification labels must be -1 or +1")
        object.__setattr__(self, "group", g)
        object.__setattr__(self, "y_true", y)
        object.__setattr__(self, "y_score", s)

    @classmethod
    def from_groups(cls, part0, part1, task: str = "regression") -> "PredictionSet":
        """Build from per-group ``(y_true, y_score)`` pairs."""
        (y0, s0), (y1, s1) = part0, part1
        y0, y1 = np.asarray(y0, float).reshape(-1), np.asarray(y1, float).reshape(-1)
        group = np.concatenate([np.zeros(y0.size, np.int64), np.ones(y1.size, np.int64)])
        return cls(group, np.concatenate([y0, y1]), np.concatenate([np.ravel(s0), np.ravel(s1)]), task)

    def part(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.group == g
        return self.y_true[m], self.y_score[m]

    def swapped(self) -> "PredictionSet":
        return PredictionSet(1 - self.group, self.y_true, self.y_score, self.task)

    def _require_groups(self):
        for g in (0, 1):
            if not np.any(self.group == g):
                raise MetricError(f"group {g} is empty")


@dataclass
class GapReport:
    value: float
    terms: list[dict] = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "terms": self.terms, "skipped": self.skipped})

    @classmethod
    def from_json(cls, text: str) -> "GapReport":
        d = json.loads(text)
        return cls(d["value"], d["terms"], d["skipped"])


def decisions(scores: np.ndarray) -> np.ndarray:
    """Threshold logits at 0: positive scores predict +1, the rest -1."""
    return np.where(np.asarray(scores) > 0, 1.0, -1.0)


def suf_gap_classification(preds: PredictionSet) -> GapReport:
    """Half the summed absolute PPV/NPV differences between groups.

    A class term is skipped (and listed in ``skipped``) when some group has
    no sample predicted as that class.
    """
    if preds.task != "binary_classification":
        raise MetricError("classification gap needs a classification prediction set")
    preds._require_groups()
    terms, skipped, total = [], [], 0.0
    for cls in (-1.0, 1.0):
        rates = []
        for g in (0, 1):
            y, s = preds.part(g)
            hit = decisions(s) == cls
            k = int(hit.sum())
            rates.append(None if k == 0 else float(np.count_nonzero(y[hit] == cls)) / k)
        if None in rates:
            skipped.append(int(cls))
            continue
        diff = abs(rates[0] - rates[1])
        total += diff
        terms.append({"y": int(cls), "rate0": rates[0], "rate1": rates[1], "diff": diff})
    if not terms:
        raise MetricError("sufficiency gap undefined: no class is predicted in both groups")
    return GapReport(0.5 * total, terms, skipped)


def regression_thresholds(scores: np.ndarray, m: int = DEFAULT_POINTS) -> np.ndarray:
    """The i/(m+1) quantiles (i = 1..m) of the pooled score distribution."""
    return np.quantile(np.asarray(scores, dtype=np.float64), np.arange(1, m + 1) / (m + 1))


def suf_gap_regression(preds: PredictionSet, m: int = DEFAULT_POINTS, use_numba: bool | None = None) -> GapReport:
    """Mean over thresholds t of |D0(Y<=t | S<=t) - D1(Y<=t | S<=t)|.

    Thresholds are pooled-score quantiles; a threshold is skipped (index
    listed in ``skipped``) when some group has no score at or below it.
    """
    if preds.task != "regression":
        raise MetricError("regression gap needs a regression prediction set")
    if int(m) < 2:
        raise MetricError("need at least 2 threshold points")
    preds._require_groups()
    ts = regression_thresholds(preds.y_score, int(m))
    counts = [_kernels.regression_counts(*preds.part(g), ts, use_numba=use_numba) for g in (0, 1)]
    (b0, c0), (b1, c1) = counts
    terms, skipped, diffs = [], [], []
    for i, t in enumerate(ts):
        if b0[i] == 0 or b1[i] == 0:
            skipped.append(i)
            continue
        r0, r1 = c0[i] / b0[i], c1[i] / b1[i]
        diffs.append(abs(r0 - r1))
        terms.append({"t": float(t), "rate0": float(r0), "rate1": float(r1), "diff": float(diffs[-1])})
    if not diffs:
        raise MetricError("sufficiency gap undefined: every threshold is skipped")
    return GapReport(math.fsum(diffs) / len(diffs), terms, skipped)


def suf_gap(preds: PredictionSet, m: int = DEFAULT_POINTS) -> GapReport:
    if preds.task == "regression":
        return suf_gap_regression(preds, m)
    return suf_gap_classification(preds)


def group_performance(preds: PredictionSet) -> tuple[float, float]:
    """Per-group accuracy (classification) or MSE (regression)."""
    preds._require_groups()
    out = []
    for g in (0, 1):
        y, s = preds.part(g)
        if preds.task == "regression":
            out.append(float(np.mean((s - y) ** 2)))
        else:
            out.append(float(np.mean(decisions(s) == y)))
    return out[0], out[1]


def performance(preds: PredictionSet) -> tuple[float, float]:
    """``(unweighted mean over groups, per-group spread)`` of accuracy or MSE.

    The second value is the absolute difference between the two groups.
    """
    a, b = group_performance(preds)
    return 0.5 * (a + b), abs(a - b)


def head_distance(h0, h1) -> float:
    """Unsquared Euclidean distance between head parameter vectors."""
    p0 = getattr(h0, "params", h0)
    p1 = getattr(h1, "params", h1)
    if hasattr(p0, "same_layout"):
        if not p0.same_layout(p1):
            raise MetricError("heads have different layouts")
        v0, v1 = p0.values, p1.values
    else:
        v0, v1 = np.asarray(p0, float), np.asarray(p1, float)
        if v0.shape != v1.shape:
            raise MetricError("heads have different layouts")
    return float(np.linalg.norm(v0 - v1))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(da @ da), float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise MetricError("Pearson correlation undefined for a constant variable")
    return float(da @ db) / np.sqrt(va * vb)


def group_label_pearson(dataset) -> float:
    """Pearson coefficient between the group index and the label."""
    return pearson(dataset.group, dataset.labels)


def dp_gap(preds: PredictionSet) -> float:
    """Absolute difference of per-group mean scores (independence diagnostic)."""
    preds._require_groups()
    return abs(float(np.mean(preds.part(0)[1])) - float(np.mean(preds.part(1)[1])))

"""Ranking metrics over a scored cohort.

Top-k selection: n_k = ceil(k/100 * n) units, highest score first, ties broken
by unit id ascending. That single ordering is shared by every metric here and
by alert generation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class ZeroPositivesWarning(UserWarning):
    pass


class UndefinedLiftError(ZeroDivisionError):
    pass


@dataclass(frozen=True, eq=False)
class ScoredCohort:
    unit_ids: tuple
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels).astype(bool)
        ids = tuple(self.unit_ids)
        if len(ids) == 0:
            raise ValueError("empty cohort")
        if not (len(ids) == len(scores) == len(labels)):
            raise ValueError("unit ids, scores and labels must be aligned")
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate unit ids")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.unit_ids)


def n_top(n: int, k_percent: float) -> int:
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    if n <= 0:
        raise ValueError("empty cohort")
    # guard against 10/100*30 = 3.0000000000000004 style round-up
    return min(n, math.ceil(round(k_percent / 100.0 * n, 9)))


def ranking(sc: ScoredCohort) -> np.ndarray:
    """Positions of units from highest to lowest score, ties by unit id."""
    id_rank = np.empty(len(sc), dtype=np.int64)
    id_rank[sorted(range(len(sc)), key=lambda i: sc.unit_ids[i])] = np.arange(len(sc))
    return np.lexsort((id_rank, -sc.scores))


def top_k(sc: ScoredCohort, k_percent: float) -> np.ndarray:
    return ranking(sc)[: n_top(len(sc), k_percent)]


def precision_at_k(sc: ScoredCohort, k_percent: float) -> float:
    top = top_k(sc, k_percent)
    return float(sc.labels[top].sum() / len(top))


def recall_at_k(sc: ScoredCohort, k_percent: float) -> float:
    total = int(sc.labels.sum())
    top = top_k(sc, k_percent)
    if total == 0:
        warnings.warn("recall@k undefined with zero positives; reporting 0", ZeroPositivesWarning, stacklevel=2)
        return 0.0
    return float(sc.labels[top].sum() / total)


def roc_auc(sc: ScoredCohort) -> float:
    """Mann-Whitney: P(score of random positive > random negative), ties count 1/2."""
    pos = int(sc.labels.sum())
    neg = len(sc) - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(sc.scores, method="average")
    u = ranks[sc.labels].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def prior_rate(labels: Sequence[bool]) -> float:
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        raise ValueError("empty label list")
    return float(labels.mean())


def lift(metric_value: float, baseline_value: float) -> float:
    if baseline_value == 0:
        raise UndefinedLiftError("lift is undefined against a zero baseline")
    return float(metric_value) / float(baseline_value)


def metric_row(sc: ScoredCohort, k_percent: float) -> dict:
    """precision, recall, auc (None if single-class) and prior at one k."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroPositivesWarning)
        rec = recall_at_k(sc, k_percent)
    pos = int(sc.labels.sum())
    return {
        "precision": precision_at_k(sc, k_percent),
        "recall": rec,
        "auc": roc_auc(sc) if 0 < pos < len(sc) else None,
        "prior": prior_rate(sc.labels),
        "n": len(sc),
        "n_k": n_top(len(sc), k_percent),
    }

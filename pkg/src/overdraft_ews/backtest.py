"""Temporal cross-validation, grid search and stability-aware model selection.

Each weekly pair (f, f + 7d) trains on cohort features as of f (labels over
(f, f + 7d]) and tests on features as of f + 7d (labels over (f + 7d, f + 14d]).
Training data for a pair pools the trailing ``pool_weeks`` train sets of the
plan, so nothing dated after f enters a fit.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import day_start
from .features import FEATURE_COLUMNS, FeatureSpec, feature_matrix
from .labeling import COHORT_LOOKBACK_DAYS, LABEL_HORIZON_DAYS, cohort_accounts, label_accounts
from .learners import Hyperparams, Model, fit, predict_scores
from .ledger import LedgerIndex
from .metrics import ScoredCohort, metric_row

log = logging.getLogger(__name__)

FRIDAY = 4
DEFAULT_K = (2.0, 5.0, 6.0, 7.0, 10.0, 15.0)
DEFAULT_POOL_WEEKS = 8
MIN_PLAN_WEEKS = 12


class SplitPlanError(ValueError):
    pass


class SelectionWarning(UserWarning):
    """No card passed the stability rule; fell back to best mean."""


class BelowTargetWarning(UserWarning):
    """No candidate k reached the precision target."""


# -- split plan -------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    train_as_of: date
    test_as_of: date

    @property
    def train_label_end(self) -> date:
        return self.train_as_of + timedelta(days=LABEL_HORIZON_DAYS)

    @property
    def test_label_end(self) -> date:
        return self.test_as_of + timedelta(days=LABEL_HORIZON_DAYS)


@dataclass(frozen=True)
class SplitPlan:
    splits: tuple[Split, ...]

    def __post_init__(self):
        for s in self.splits:
            if s.test_as_of != s.train_as_of + timedelta(days=7):
                raise SplitPlanError(f"test date {s.test_as_of} is not train date {s.train_as_of} + 7d")
        for a, b in zip(self.splits, self.splits[1:]):
            if not b.train_as_of > a.train_as_of:
                raise SplitPlanError("split pairs must be strictly increasing")

    def __len__(self):
        return len(self.splits)

    def __iter__(self):
        return iter(self.splits)

    @property
    def test_dates(self) -> list[date]:
        return [s.test_as_of for s in self.splits]

    def to_dict(self) -> dict:
        return {"splits": [[s.train_as_of.isoformat(), s.test_as_of.isoformat()] for s in self.splits]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple(Split(date.fromisoformat(a), date.fromisoformat(b)) for a, b in d["splits"]))


def make_weekly_splits(start: date, end: date, weekday: int = FRIDAY) -> SplitPlan:
    """One pair per ``weekday`` f with f - 183d >= start and f + 14d <= end.

    ``end`` is exclusive, as for a dataset: the last label window may close at
    ``end`` 00:00.
    """
    if (end - start).days < MIN_PLAN_WEEKS * 7:
        raise SplitPlanError(f"range {start}..{end} is shorter than {MIN_PLAN_WEEKS} weeks")
    first = start + timedelta(days=COHORT_LOOKBACK_DAYS)
    first += timedelta(days=(weekday - first.weekday()) % 7)
    splits = []
    f = first
    while f + timedelta(days=2 * LABEL_HORIZON_DAYS) <= end:
        splits.append(Split(f, f + timedelta(days=7)))
        f += timedelta(days=7)
    if not splits:
        raise SplitPlanError(f"no {weekday=} date in {start}..{end} leaves room for look-back and two label weeks")
    return SplitPlan(tuple(splits))


# -- weekly design matrices -------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeekData:
    bank_id: str
    as_of: date
    accounts: np.ndarray
    X: np.ndarray
    y: np.ndarray
    max_observed: int

    def __len__(self):
        return len(self.accounts)


class WeeklyDesign:
    """Caches per-(bank, as_of) cohort features and labels over one ledger."""

    def __init__(self, index: LedgerIndex, spec: FeatureSpec = FeatureSpec()):
        self.index = index
        self.spec = spec
        self._cache: dict[tuple[str, date], WeekData] = {}

    def get(self, bank_id: str, as_of: date) -> WeekData:
        key = (bank_id, as_of)
        if key not in self._cache:
            acc = cohort_accounts(self.index, as_of, [bank_id])
            audit: dict = {}
            X = feature_matrix(self.index, acc, as_of, self.spec, audit=audit)
            y = label_accounts(self.index, acc, as_of)
            self._cache[key] = WeekData(bank_id, as_of, acc, X, y, audit["max_observed"])
        return self._cache[key]

    def pooled(self, bank_id: str, dates: Sequence[date]) -> tuple[np.ndarray, np.ndarray]:
        parts = [self.get(bank_id, d) for d in dates]
        parts = [p for p in parts if len(p)]
        if not parts:
            return np.zeros((0, len(FEATURE_COLUMNS))), np.zeros(0, dtype=bool)
        return np.vstack([p.X for p in parts]).astype(np.float64), np.concatenate([p.y for p in parts])


def pool_dates(plan: SplitPlan, i: int, pool_weeks: int = DEFAULT_POOL_WEEKS) -> list[date]:
    """Train as-of dates pooled for split i: its own and up to pool_weeks - 1 earlier ones."""
    lo = max(0, i - pool_weeks + 1)
    return [s.train_as_of for s in plan.splits[lo : i + 1]]


# -- model cards ------------------------------------------------------------


@dataclass(eq=False)
class ModelCard:
    bank_id: str
    hp: Hyperparams
    # test as_of -> {k: metric row} ; None marks a split that could not be evaluated
    history: dict[date, dict[float, dict] | None] = field(default_factory=dict)
    k_percent: float | None = None
    selected: bool = False
    model: Model | None = None

    def weeks(self) -> list[date]:
        return sorted(self.history)

    def precision_series(self, k: float, weeks: Sequence[date] | None = None) -> list[float | None]:
        weeks = self.weeks() if weeks is None else weeks
        out = []
        for w in weeks:
            row = self.history.get(w)
            out.append(None if row is None or k not in row else row[k]["precision"])
        return out

    def mean_metric(self, name: str, k: float, weeks: Sequence[date] | None = None) -> float | None:
        weeks = self.weeks() if weeks is None else weeks
        vals = [self.history[w][k][name] for w in weeks if self.history.get(w) is not None]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "bank_id": self.bank_id,
            "hyperparams": self.hp.to_dict(),
            "key": self.hp.key(),
            "k_percent": self.k_percent,
            "selected": self.selected,
            "history": {
                w.isoformat(): None if row is None else {_kstr(k): m for k, m in sorted(row.items())}
                for w, row in sorted(self.history.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCard":
        history = {
            date.fromisoformat(w): None if row is None else {float(k): m for k, m in row.items()}
            for w, row in d["history"].items()
        }
        return cls(d["bank_id"], Hyperparams.from_dict(d["hyperparams"]), history, d.get("k_percent"), bool(d.get("selected")))


def _kstr(k: float) -> str:
    return f"{float(k):g}"


def save_cards(cards: Sequence[ModelCard], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cards], indent=1, sort_keys=True) + "\n")


def load_cards(path) -> list[ModelCard]:
    return [ModelCard.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- grid ------------------------------------------------------------------


def run_grid(
    bank_id: str,
    plan: SplitPlan,
    grid: Sequence[Hyperparams],
    k_candidates: Sequence[float],
    data: WeeklyDesign | LedgerIndex,
    *,
    pool_weeks: int = DEFAULT_POOL_WEEKS,
    keep_model: bool = True,
) -> list[ModelCard]:
    """Fit every hp on every split; one card per hp, history keyed by test date.

    The model kept on each card is the one fitted for the final split.
    """
    if not isinstance(data, WeeklyDesign):
        data = WeeklyDesign(data)
    ks = sorted(float(k) for k in k_candidates)
    cards = [ModelCard(bank_id, hp) for hp in grid]
    for i, split in enumerate(plan):
        X, y = data.pooled(bank_id, pool_dates(plan, i, pool_weeks))
        test = data.get(bank_id, split.test_as_of)
        missing = len(test) == 0 or len(y) < 2 or y.min() == y.max()
        for card in cards:
            if missing:
                card.history[split.test_as_of] = None
                continue
            model = fit(card.hp, X, y, columns=FEATURE_COLUMNS)
            sc = ScoredCohort(tuple(int(a) for a in test.accounts), predict_scores(model, test.X.astype(np.float64)), test.y)
            card.history[split.test_as_of] = {k: metric_row(sc, k) for k in ks}
            if keep_model:
                card.model = model
        if missing:
            log.warning("bank %s split %s: no usable train/test data, marked missing", bank_id, split.test_as_of)
    return cards


def audit_leakage(plan: SplitPlan, data: WeeklyDesign, bank_id: str, pool_weeks: int = DEFAULT_POOL_WEEKS) -> list[dict]:
    """Per split: latest observed event feeding train features vs the train as-of,
    and train label windows vs the test label window. Empty list means clean."""
    problems = []
    for i, split in enumerate(plan):
        for d in pool_dates(plan, i, pool_weeks):
            wk = data.get(bank_id, d)
            if wk.max_observed > day_start(d):
                problems.append({"split": split.test_as_of.isoformat(), "as_of": d.isoformat(), "rule": "train feature observed after as-of"})
            if d + timedelta(days=LABEL_HORIZON_DAYS) > split.test_as_of:
                problems.append({"split": split.test_as_of.isoformat(), "as_of": d.isoformat(), "rule": "train label window overlaps test label window"})
        test = data.get(bank_id, split.test_as_of)
        if test.max_observed > day_start(split.test_as_of):
            problems.append({"split": split.test_as_of.isoformat(), "as_of": split.test_as_of.isoformat(), "rule": "test feature observed after as-of"})
    return problems


# -- selection --------------------------------------------------------------


@dataclass
class Selection:
    card: ModelCard
    weeks: list[date]
    k_percent: float
    fallback: bool
    trail: list[dict]

    def to_dict(self) -> dict:
        return {
            "winner": self.card.hp.key(),
            "k_percent": self.k_percent,
            "weeks": [w.isoformat() for w in self.weeks],
            "fallback": self.fallback,
            "cards": self.trail,
        }


def _last_weeks(cards: Sequence[ModelCard], last_n: int) -> list[date]:
    weeks = sorted(set().union(*(c.history.keys() for c in cards)))
    usable = [w for w in weeks if any(c.history.get(w) is not None for c in cards)]
    if len(usable) < last_n:
        raise ValueError(f"need {last_n} evaluated weeks, have {len(usable)}")
    return usable[-last_n:]


def select_with_trail(
    cards: Sequence[ModelCard],
    k_percent: float = 10.0,
    last_n: int = 4,
    tolerance: float = 0.05,
    mode: str = "relative",
) -> Selection:
    """Stability rule with the full eligibility audit trail."""
    if not cards:
        raise ValueError("no cards to select from")
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown tolerance mode {mode!r}")
    k = float(k_percent)
    weeks = _last_weeks(cards, last_n)
    series = {id(c): c.precision_series(k, weeks) for c in cards}
    best = []
    for j in range(len(weeks)):
        vals = [s[j] for s in series.values() if s[j] is not None]
        best.append(max(vals) if vals else None)

    def ok(v, b):
        if v is None or b is None:
            return False
        floor = (1.0 - tolerance) * b if mode == "relative" else b - tolerance
        return v >= floor - 1e-12

    trail, scored = [], []
    for c in cards:
        s = series[id(c)]
        per_week = [ok(v, b) for v, b in zip(s, best)]
        mean = float(np.mean(s)) if all(v is not None for v in s) else None
        eligible = all(per_week)
        trail.append({"key": c.hp.key(), "precision": s, "eligible_by_week": per_week, "eligible": eligible, "mean": mean})
        scored.append((c, eligible, mean))

    def rank(entry):
        c, _, mean = entry
        return (-round(mean, 12), c.hp.size(), c.hp.key())

    pool = [e for e in scored if e[1] and e[2] is not None]
    fallback = not pool
    if fallback:
        pool = [e for e in scored if e[2] is not None]
        if not pool:
            raise ValueError("no card has precision for every selection week")
        warnings.warn("no card met the stability rule in every week; selecting by mean precision", SelectionWarning, stacklevel=2)
    winner = min(pool, key=rank)[0]
    return Selection(winner, weeks, k, fallback, sorted(trail, key=lambda t: t["key"]))


def select_model(
    cards: Sequence[ModelCard],
    last_n: int = 4,
    tolerance: float = 0.05,
    k_percent: float = 10.0,
    mode: str = "relative",
) -> ModelCard:
    """Cards near-best in each of the last ``last_n`` weeks are eligible; the
    eligible card with the highest mean precision@k wins."""
    return select_with_trail(cards, k_percent, last_n, tolerance, mode).card


def choose_k(card: ModelCard, precision_target_band: tuple[float, float] = (0.4, 0.5), last_n: int = 4) -> float:
    """Largest k whose mean precision@k over the last ``last_n`` weeks reaches the band floor."""
    lo, hi = precision_target_band
    weeks = [w for w in card.weeks() if card.history[w] is not None][-last_n:]
    if not weeks:
        raise ValueError("card has no evaluated weeks")
    ks = sorted(card.history[weeks[-1]])
    good = [k for k in ks if (card.mean_metric("precision", k, weeks) or 0.0) >= lo]
    if not good:
        warnings.warn(f"no k reaches mean precision {lo}; using smallest k {ks[0]:g}", BelowTargetWarning, stacklevel=2)
        return ks[0]
    k = max(good)
    recall = card.mean_metric("recall", k, weeks)
    if recall is not None and lo <= recall <= hi:
        log.info("k=%g balances precision and recall (recall %.3f)", k, recall)
    return k


def finalize(cards: Sequence[ModelCard], **select_kw) -> Selection:
    """Select the winner, set its k and flag it; exactly one card ends selected."""
    sel = select_with_trail(cards, **select_kw)
    for c in cards:
        c.selected = c is sel.card
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BelowTargetWarning)
        sel.card.k_percent = choose_k(sel.card, last_n=len(sel.weeks))
    return sel


def mean_over_weeks(card: ModelCard, name: str, k: float) -> float | None:
    return card.mean_metric(name, float(k))

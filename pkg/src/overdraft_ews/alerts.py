"""Weekly scoring and top-k alert lists."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from datetime import date
from typing import Sequence

import numpy as np

from .features import FEATURE_COLUMNS, FeatureSpec, feature_matrix
from .labeling import cohort_accounts
from .learners import Model, predict_scores
from .ledger import LedgerIndex
from .metrics import ScoredCohort, n_top, ranking


@dataclass(frozen=True)
class Alert:
    week: date
    customer_id: str
    account_id: str
    bank_id: str
    risk_score: int
    rank: int
    total_overdrafts_6m: int
    overdrafted_this_week: bool
    days_since_overdraft: int
    balance: int


ALERT_COLUMNS = tuple(f.name for f in fields(Alert))


def risk_scores(scores: np.ndarray) -> np.ndarray:
    """floor(100 * share of the bank's cohort scoring strictly below each unit)."""
    scores = np.asarray(scores, dtype=np.float64)
    below = np.searchsorted(np.sort(scores), scores, side="left")
    return np.floor(100.0 * below / len(scores) + 1e-9).astype(np.int64)


def alerts_from_scores(
    week: date,
    bank_id: str,
    customer_ids: Sequence[str],
    account_ids: Sequence[str],
    scores: np.ndarray,
    X: np.ndarray,
    k_percent: float,
) -> list[Alert]:
    """Top n_k units by score (ties by account id), with display fields taken from ``X``."""
    sc = ScoredCohort(tuple(account_ids), scores, np.zeros(len(scores), dtype=bool))
    order = ranking(sc)[: n_top(len(sc), k_percent)]
    risk = risk_scores(scores)
    col = {c: j for j, c in enumerate(FEATURE_COLUMNS)}
    out = []
    for r, i in enumerate(order, start=1):
        row = X[i]
        out.append(
            Alert(
                week=week,
                customer_id=customer_ids[i],
                account_id=account_ids[i],
                bank_id=bank_id,
                risk_score=int(risk[i]),
                rank=r,
                total_overdrafts_6m=int(row[col["f_od_count_6m"]]),
                overdrafted_this_week=bool(row[col["f_od_last_week"]]),
                days_since_overdraft=int(row[col["f_days_since_last_od"]]),
                balance=int(row[col["f_recomputed_balance"]]),
            )
        )
    return out


def score_week(
    card,
    index: LedgerIndex,
    as_of: date,
    spec: FeatureSpec = FeatureSpec(),
    k_percent: float | None = None,
) -> list[Alert]:
    """Alerts for the card's bank at ``as_of``. Labels are not needed, so this
    also works for the most recent week of data."""
    model: Model | None = card.model
    if model is None:
        raise ValueError(f"card {card.hp.key()} for {card.bank_id} carries no trained model")
    k = card.k_percent if k_percent is None else k_percent
    if k is None:
        raise ValueError("no k_percent chosen for this card")
    acc = cohort_accounts(index, as_of, [card.bank_id])
    if len(acc) == 0:
        return []
    X = feature_matrix(index, acc, as_of, spec)
    scores = predict_scores(model, X.astype(np.float64), columns=FEATURE_COLUMNS)
    cust = [index.customer_ids[index.account_customer[a]] for a in acc]
    aids = [index.account_ids[a] for a in acc]
    return alerts_from_scores(as_of, card.bank_id, cust, aids, scores, X, k)


def write_alerts_csv(alerts: Sequence[Alert], path, variants: dict[str, str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ALERT_COLUMNS, "variant"])
        for a in alerts:
            d = asdict(a)
            d["week"] = a.week.isoformat()
            d["overdrafted_this_week"] = int(a.overdrafted_this_week)
            w.writerow([*(d[c] for c in ALERT_COLUMNS), (variants or {}).get(a.customer_id, "")])


def read_alerts_csv(path) -> list[Alert]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(
                Alert(
                    week=date.fromisoformat(r["week"]),
                    customer_id=r["customer_id"],
                    account_id=r["account_id"],
                    bank_id=r["bank_id"],
                    risk_score=int(r["risk_score"]),
                    rank=int(r["rank"]),
                    total_overdrafts_6m=int(r["total_overdrafts_6m"]),
                    overdrafted_this_week=bool(int(r["overdrafted_this_week"])),
                    days_since_overdraft=int(r["days_since_overdraft"]),
                    balance=int(r["balance"]),
                )
            )
    return out


def expected_alert_count(n: int, k_percent: float) -> int:
    return 0 if n == 0 else n_top(n, k_percent)


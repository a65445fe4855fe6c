"""Plot-ready CSV tables built from a finished run."""

from __future__ import annotations

import csv
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from .backtest import ModelCard
from .domain import SECONDS_PER_DAY
from .ledger import LedgerIndex
from .metrics import UndefinedLiftError, lift

TABLE2_COLUMNS = ("bank", "model_type", "k", "precision@k", "recall@k", "prior", "lift_prior", "lift_rules")
MODEL_TYPES = {"gbdt": "GBDT", "rforest": "RF", "dtree": "DT", "logreg": "LR", "ffnn": "FFNN"}


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else _fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, date):
        return v.isoformat()
    return v


def _lift(a, b):
    if a is None or b is None:
        return None
    try:
        return lift(a, b)
    except UndefinedLiftError:
        return None


def fees_per_bank(index: LedgerIndex) -> list[tuple]:
    """bank, fee count, fee total (cents), accounts charged."""
    rows = index.fee_rows
    bank = index.account_bank[index.tx_account[rows]]
    out = []
    for b, bank_id in enumerate(index.bank_ids):
        sel = rows[bank == b]
        out.append((bank_id, len(sel), int(index.tx_amount[sel].sum()), len(np.unique(index.tx_account[sel]))))
    return out


def overdrafts_per_week(index: LedgerIndex, start: date, end: date) -> list[tuple]:
    """bank, week start (Monday), fee count, accounts charged that week."""
    rows = index.fee_rows
    day = index.tx_true[rows] // SECONDS_PER_DAY
    first_monday = start - timedelta(days=start.weekday())
    base = (first_monday - date(1970, 1, 1)).days
    week = (day - base) // 7
    bank = index.account_bank[index.tx_account[rows]]
    acct = index.tx_account[rows]
    n_weeks = ((end - first_monday).days + 6) // 7
    out = []
    for b, bank_id in enumerate(index.bank_ids):
        for w in range(n_weeks):
            sel = (bank == b) & (week == w)
            out.append((bank_id, first_monday + timedelta(weeks=w), int(sel.sum()), len(np.unique(acct[sel]))))
    return out


def pr_curves(bank_id: str, cards: Sequence[ModelCard], role: str) -> list[tuple]:
    """bank, role, model key, k, mean precision@k, mean recall@k over every evaluated week."""
    out = []
    for c in cards:
        ks = sorted({k for row in c.history.values() if row for k in row})
        for k in ks:
            out.append((bank_id, role, c.hp.key(), k, c.mean_metric("precision", k), c.mean_metric("recall", k)))
    return out


def stability(bank_id: str, cards: Sequence[ModelCard], k: float, role: str) -> list[tuple]:
    """bank, role, model key, week, precision@k: one line per card per week."""
    out = []
    for c in cards:
        for w, p in zip(c.weeks(), c.precision_series(k)):
            out.append((bank_id, role, c.hp.key(), w, p))
    return out


def metric_rows(bank_id: str, cards: Sequence[ModelCard], baseline: ModelCard | None) -> list[tuple]:
    """bank, as_of, model key, k, precision, recall, auc, prior, lift_prior, lift_rules."""
    out = []
    for c in cards:
        for w in c.weeks():
            row = c.history[w]
            if row is None:
                continue
            base_row = baseline.history.get(w) if baseline is not None else None
            for k, m in sorted(row.items()):
                rule_p = base_row[k]["precision"] if base_row else None
                out.append(
                    (bank_id, w, c.hp.key(), k, m["precision"], m["recall"], m["auc"], m["prior"],
                     _lift(m["precision"], m["prior"]), _lift(m["precision"], rule_p))
                )
    return out


def table2_row(bank_id: str, card: ModelCard, baseline: ModelCard | None, weeks: Sequence[date]) -> tuple:
    """Summary for the selected card at its chosen k, averaged over ``weeks``."""
    k = float(card.k_percent)
    p = card.mean_metric("precision", k, weeks)
    r = card.mean_metric("recall", k, weeks)
    prior = card.mean_metric("prior", k, weeks)
    rule = baseline.mean_metric("precision", k, weeks) if baseline is not None else None
    return (bank_id, MODEL_TYPES.get(card.hp.algorithm, card.hp.algorithm), k, p, r, prior, _lift(p, prior), _lift(p, rule))


def importance_rows(bank_id: str, importances: dict[str, float]) -> list[tuple]:
    ranked = sorted(importances.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(bank_id, name, w, i + 1) for i, (name, w) in enumerate(ranked)]

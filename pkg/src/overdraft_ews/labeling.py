"""Fee detection, one-week look-forward labels and the eligible cohort."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import SECONDS_PER_DAY, Account, Transaction, day_start
from .ledger import FeeMatcher, LedgerIndex, check_matchers, matchers_from_policies

COHORT_LOOKBACK_DAYS = 183
LABEL_HORIZON_DAYS = 7


class LabelHorizonError(ValueError):
    """The label window runs past the end of the data."""


@dataclass(frozen=True)
class LabeledUnit:
    customer_id: str
    account_id: str
    as_of_date: date
    label: bool


def is_fee_transaction(txn: Transaction, matcher: FeeMatcher) -> bool:
    return txn.direction == "debit" and matcher.matches(txn.description)


def _index(bundle_or_index) -> LedgerIndex:
    if isinstance(bundle_or_index, LedgerIndex):
        return bundle_or_index
    return LedgerIndex(bundle_or_index)


def _check_horizon(index: LedgerIndex, as_of: date) -> None:
    if as_of + timedelta(days=LABEL_HORIZON_DAYS) > index.bundle.end:
        raise LabelHorizonError(
            f"label window for {as_of} ends {as_of + timedelta(days=LABEL_HORIZON_DAYS)}, "
            f"after the data ends ({index.bundle.end})"
        )


def label_accounts(index: LedgerIndex, accounts: np.ndarray, as_of: date) -> np.ndarray:
    """Vector form of :func:`label_unit` over account indices."""
    _check_horizon(index, as_of)
    t = day_start(as_of)
    rows, owner = index.fee_range(accounts, t, t + LABEL_HORIZON_DAYS * SECONDS_PER_DAY, lo_open=True)
    out = np.zeros(len(accounts), dtype=bool)
    out[owner] = True
    return out


def label_unit(account: Account, as_of: date, ledger) -> LabeledUnit:
    """Label is true iff a fee has true_timestamp in (as_of 00:00, as_of + 7d 00:00]."""
    index = _index(ledger)
    a = index.account_pos[account.account_id]
    label = bool(label_accounts(index, np.array([a]), as_of)[0])
    return LabeledUnit(account.customer_id, account.account_id, as_of, label)


def cohort_accounts(index: LedgerIndex, as_of: date, supported_banks: Iterable[str] | None = None) -> np.ndarray:
    """Account indices in canonical (bank_id, customer_id, account_id) order."""
    t = day_start(as_of)
    lo = t - COHORT_LOOKBACK_DAYS * SECONDS_PER_DAY
    checking = np.flatnonzero(index.is_checking)
    if supported_banks is not None:
        wanted = {index.bank_ids.index(b) for b in supported_banks if b in index.bank_ids}
        checking = checking[np.isin(index.account_bank[checking], list(wanted))]
    rows, owner = index.fee_range(checking, lo, t)
    members = checking[np.unique(owner)]
    # account ids sort the same way as positions, customers likewise
    order = np.lexsort((members, index.account_customer[members], index.account_bank[members]))
    return members[order]


def build_cohort(bundle_or_index, as_of: date, supported_banks: Iterable[str] | None = None) -> list[tuple[str, str]]:
    """(customer_id, account_id) for checking accounts with a fee in [as_of - 183d, as_of]."""
    index = _index(bundle_or_index)
    acc = cohort_accounts(index, as_of, supported_banks)
    return [(index.customer_ids[index.account_customer[a]], index.account_ids[a]) for a in acc]


def label_cohort(bundle_or_index, as_of: date, supported_banks: Iterable[str] | None = None) -> list[LabeledUnit]:
    index = _index(bundle_or_index)
    acc = cohort_accounts(index, as_of, supported_banks)
    labels = label_accounts(index, acc, as_of)
    return [
        LabeledUnit(index.customer_ids[index.account_customer[a]], index.account_ids[a], as_of, bool(y))
        for a, y in zip(acc, labels)
    ]


def write_labels_csv(units: Sequence[LabeledUnit], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", "account_id", "as_of_date", "label"])
        for u in units:
            w.writerow([u.customer_id, u.account_id, u.as_of_date.isoformat(), int(u.label)])


def read_labels_csv(path: Path) -> list[LabeledUnit]:
    with open(path, newline="") as fh:
        return [
            LabeledUnit(r["customer_id"], r["account_id"], date.fromisoformat(r["as_of_date"]), r["label"] == "1")
            for r in csv.DictReader(fh)
        ]


def save_matchers(matchers: dict[str, FeeMatcher], path: Path) -> None:
    doc = [matchers[b].to_dict() for b in sorted(matchers)]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_matchers(path: Path, policies=None) -> dict[str, FeeMatcher]:
    matchers = {}
    for d in json.loads(Path(path).read_text()):
        m = FeeMatcher.from_dict(d)
        if m.bank_id in matchers:
            raise ValueError(f"duplicate matcher for bank {m.bank_id}")
        matchers[m.bank_id] = m
    if policies is not None:
        check_matchers(matchers, policies)
    return matchers


__all__ = [
    "COHORT_LOOKBACK_DAYS",
    "LABEL_HORIZON_DAYS",
    "FeeMatcher",
    "LabelHorizonError",
    "LabeledUnit",
    "build_cohort",
    "cohort_accounts",
    "is_fee_transaction",
    "label_accounts",
    "label_cohort",
    "label_unit",
    "load_matchers",
    "matchers_from_policies",
    "read_labels_csv",
    "save_matchers",
    "write_labels_csv",
]

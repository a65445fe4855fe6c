"""Feature extraction at an as-of instant, using only data observed by then.

An event counts in a trailing window of W days iff its true_timestamp is in
[T - W, T] and its observed_timestamp <= T, where T is the as-of date at
00:00 UTC. That rule is the leakage boundary for the whole pipeline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import SECONDS_PER_DAY, AccountKind, day_start
from .labeling import LabeledUnit, label_accounts
from .ledger import LedgerIndex

FEATURE_VERSION = "1"


@dataclass(frozen=True)
class FeatureSpec:
    windows: tuple[int, ...] = (7, 28, 61, 183)
    small_debit: int = 5_000
    large_credit: int = 20_000
    days_cap: int = 183

    def __post_init__(self):
        w = tuple(sorted(int(x) for x in self.windows))
        if len(w) != 4 or w[0] <= 0 or len(set(w)) != 4:
            raise ValueError(f"need four distinct positive windows (week, four weeks, two months, six months), got {self.windows}")
        if self.small_debit <= 0 or self.large_credit <= 0 or self.days_cap <= 0:
            raise ValueError("thresholds must be positive")
        object.__setattr__(self, "windows", w)

    @property
    def week(self) -> int:
        return self.windows[0]

    @property
    def four_weeks(self) -> int:
        return self.windows[1]

    @property
    def two_months(self) -> int:
        return self.windows[2]

    @property
    def six_months(self) -> int:
        return self.windows[3]

    def to_dict(self) -> dict:
        return {**asdict(self), "windows": list(self.windows), "version": FEATURE_VERSION}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            windows=tuple(d.get("windows", (7, 28, 61, 183))),
            small_debit=int(d.get("small_debit", 5_000)),
            large_credit=int(d.get("large_credit", 20_000)),
            days_cap=int(d.get("days_cap", 183)),
        )


@dataclass(frozen=True)
class FeatureRow:
    f_od_count_6m: int
    f_od_count_6m_all: int
    f_days_since_last_od: int
    f_last_od_amount: int
    f_od_last_week: int
    f_n_checking: int
    f_n_credit_card: int
    f_n_savings: int
    f_n_cd: int
    f_n_investment: int
    f_last_known_balance: int
    f_recomputed_balance: int
    f_debit_count_4w: int
    f_debit_min_4w: int
    f_debit_max_4w: int
    f_debit_avg_4w: int
    f_debit_count_1w: int
    f_debit_min_1w: int
    f_debit_max_1w: int
    f_debit_avg_1w: int
    f_credit_count_4w: int
    f_credit_min_4w: int
    f_credit_max_4w: int
    f_credit_avg_4w: int
    f_credit_count_1w: int
    f_credit_min_1w: int
    f_credit_max_1w: int
    f_credit_avg_1w: int
    f_debit_sum_1w: int
    f_debit_under50_count_2m: int
    f_credit_over200_count_2m: int
    f_login_count_1w: int
    f_login_count_4w: int
    f_days_since_last_login: int


FEATURE_COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(FeatureRow))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Row i of ``X`` belongs to ``units[i]``.

    Built with ``with_labels=False`` (scoring past the data horizon) every label
    is False and ``labels_known`` is False.
    """

    columns: tuple[str, ...]
    X: np.ndarray
    units: tuple[LabeledUnit, ...]
    account_idx: np.ndarray
    labels_known: bool = True

    @property
    def y(self) -> np.ndarray:
        return np.array([u.label for u in self.units], dtype=bool)

    def row(self, i: int) -> FeatureRow:
        return FeatureRow(*(int(v) for v in self.X[i]))

    def __len__(self):
        return len(self.units)


def _window_stats(amount, owner, mask, n):
    """count, min, max, floor-average per owner over the masked rows; empty -> 0."""
    a = amount[mask]
    o = owner[mask]
    count = np.bincount(o, minlength=n).astype(np.int64)
    total = np.bincount(o, weights=a, minlength=n)
    # float sums are exact here: well below 2**53 cents
    total = np.rint(total).astype(np.int64)
    big = np.iinfo(np.int64).max
    mn = np.full(n, big, dtype=np.int64)
    mx = np.full(n, -big, dtype=np.int64)
    np.minimum.at(mn, o, a)
    np.maximum.at(mx, o, a)
    has = count > 0
    avg = np.zeros(n, dtype=np.int64)
    avg[has] = total[has] // count[has]
    return count, np.where(has, mn, 0), np.where(has, mx, 0), avg, total


def _last_per_owner(owner: np.ndarray, n: int) -> np.ndarray:
    """Position of the last element for each owner (rows grouped by owner), -1 if none."""
    last = np.full(n, -1, dtype=np.int64)
    last[owner] = np.arange(len(owner))  # later writes win
    return last


def feature_matrix(
    index: LedgerIndex, accounts: np.ndarray, as_of: date, spec: FeatureSpec = FeatureSpec(), audit: dict | None = None
) -> np.ndarray:
    """int64 matrix (len(accounts) x 34) in FEATURE_COLUMNS order.

    If ``audit`` is given, ``audit["max_observed"]`` receives the latest
    observed_timestamp of any event that fed the matrix (-1 if none).
    """
    accounts = np.asarray(accounts, dtype=np.int64)
    n = len(accounts)
    T = day_start(as_of)
    t_day = T // SECONDS_PER_DAY
    day = SECONDS_PER_DAY
    cap = spec.days_cap
    cols: dict[str, np.ndarray] = {}
    used: list[np.ndarray] = []

    # overdraft history on this account
    rows, owner = index.fee_range(accounts, T - spec.six_months * day, T)
    seen = index.tx_observed[rows] <= T
    rows, owner = rows[seen], owner[seen]
    used.append(index.tx_observed[rows])
    cols["f_od_count_6m"] = np.bincount(owner, minlength=n)
    last = _last_per_owner(owner, n)
    has = last >= 0
    last_ts = np.where(has, index.tx_true[rows[np.maximum(last, 0)]] if len(rows) else 0, 0)
    cols["f_days_since_last_od"] = np.where(has, np.minimum(cap, t_day - last_ts // day), cap)
    cols["f_last_od_amount"] = np.where(has, index.tx_amount[rows[np.maximum(last, 0)]] if len(rows) else 0, 0)
    recent = index.tx_true[rows] >= T - spec.week * day
    cols["f_od_last_week"] = (np.bincount(owner[recent], minlength=n) > 0).astype(np.int64)

    # overdrafts across every account the customer holds
    customers = index.account_customer[accounts]
    all_acc, acc_owner = index.accounts_of(customers)
    rows_all, pos = index.fee_range(all_acc, T - spec.six_months * day, T)
    seen_all = index.tx_observed[rows_all] <= T
    used.append(index.tx_observed[rows_all[seen_all]])
    cols["f_od_count_6m_all"] = np.bincount(acc_owner[pos[seen_all]], minlength=n)

    # product holdings
    kinds = index.account_kind[all_acc]
    for kind, name in (
        (AccountKind.CHECKING, "f_n_checking"),
        (AccountKind.CREDIT_CARD, "f_n_credit_card"),
        (AccountKind.SAVINGS, "f_n_savings"),
        (AccountKind.CD, "f_n_cd"),
        (AccountKind.INVESTMENT, "f_n_investment"),
    ):
        cols[name] = np.bincount(acc_owner[kinds == kind.value], minlength=n)

    # balances: latest observed snapshot, rolled forward with observed transactions
    b_rows, b_owner = index.bal_range(accounts, 0, T)
    ok = index.bal_observed[b_rows] <= T
    b_rows, b_owner = b_rows[ok], b_owner[ok]
    used.append(index.bal_observed[b_rows])
    b_last = _last_per_owner(b_owner, n)
    has_bal = b_last >= 0
    snap = b_rows[np.maximum(b_last, 0)] if len(b_rows) else np.zeros(n, dtype=np.int64)
    snap_bal = np.where(has_bal, index.bal_balance[snap] if len(b_rows) else 0, 0)
    snap_ts = np.where(has_bal, index.bal_true[snap] if len(b_rows) else 0, 0)
    cols["f_last_known_balance"] = snap_bal
    r_rows, r_owner = index.tx_range(accounts[has_bal], snap_ts[has_bal], T, lo_open=True)
    r_ok = index.tx_observed[r_rows] <= T
    used.append(index.tx_observed[r_rows[r_ok]])
    delta = np.zeros(n, dtype=np.int64)
    if r_ok.any():
        target = np.flatnonzero(has_bal)[r_owner[r_ok]]
        np.add.at(delta, target, index.tx_signed[r_rows[r_ok]])
    cols["f_recomputed_balance"] = np.where(has_bal, snap_bal + delta, 0)

    # debit / credit activity, fees excluded from the debit side
    w_rows, w_owner = index.tx_range(accounts, T - spec.two_months * day, T)
    keep = (index.tx_observed[w_rows] <= T) & ~index.tx_fee[w_rows]
    w_rows, w_owner = w_rows[keep], w_owner[keep]
    used.append(index.tx_observed[w_rows])
    ts = index.tx_true[w_rows]
    amt = index.tx_amount[w_rows]
    credit = index.tx_credit[w_rows]
    in4 = ts >= T - spec.four_weeks * day
    in1 = ts >= T - spec.week * day
    debit_1w = None
    for side, side_mask in (("debit", ~credit), ("credit", credit)):
        for tag, wmask in (("4w", in4), ("1w", in1)):
            c, mn, mx, avg, total = _window_stats(amt, w_owner, side_mask & wmask, n)
            cols[f"f_{side}_count_{tag}"] = c
            cols[f"f_{side}_min_{tag}"] = mn
            cols[f"f_{side}_max_{tag}"] = mx
            cols[f"f_{side}_avg_{tag}"] = avg
            if side == "debit" and tag == "1w":
                debit_1w = total
    cols["f_debit_sum_1w"] = debit_1w
    cols["f_debit_under50_count_2m"] = np.bincount(w_owner[~credit & (amt < spec.small_debit)], minlength=n)
    cols["f_credit_over200_count_2m"] = np.bincount(w_owner[credit & (amt > spec.large_credit)], minlength=n)

    # logins (observed as they happen)
    l_ts, l_owner = index.logins_of(customers)
    before = l_ts <= T
    l_ts, l_owner = l_ts[before], l_owner[before]
    used.append(l_ts)
    cols["f_login_count_1w"] = np.bincount(l_owner[l_ts >= T - spec.week * day], minlength=n)
    cols["f_login_count_4w"] = np.bincount(l_owner[l_ts >= T - spec.four_weeks * day], minlength=n)
    latest = np.full(n, np.iinfo(np.int64).min, dtype=np.int64)
    np.maximum.at(latest, l_owner, l_ts)
    any_login = latest > np.iinfo(np.int64).min
    cols["f_days_since_last_login"] = np.where(
        any_login, np.minimum(cap, t_day - np.where(any_login, latest, 0) // day), cap
    )

    X = np.empty((n, len(FEATURE_COLUMNS)), dtype=np.int64)
    for j, name in enumerate(FEATURE_COLUMNS):
        X[:, j] = cols[name]
    if audit is not None:
        allts = np.concatenate(used)
        audit["max_observed"] = int(allts.max()) if len(allts) else -1
    return X


def extract_features(customer_id: str, account_id: str, as_of: date, spec: FeatureSpec, ledger) -> FeatureRow:
    """Feature row for one (customer, checking account) unit."""
    index = ledger if isinstance(ledger, LedgerIndex) else LedgerIndex(ledger)
    a = index.account_pos[account_id]
    if index.customer_ids[index.account_customer[a]] != customer_id:
        raise ValueError(f"account {account_id} does not belong to customer {customer_id}")
    X = feature_matrix(index, np.array([a]), as_of, spec)
    return FeatureRow(*(int(v) for v in X[0]))


def recompute_balance(account_id: str, as_of: date, ledger) -> int | None:
    """Latest observed snapshot plus observed transactions after it; None without a snapshot."""
    index = ledger if isinstance(ledger, LedgerIndex) else LedgerIndex(ledger)
    a = index.account_pos[account_id]
    T = day_start(as_of)
    rows, _ = index.bal_range(np.array([a]), 0, T)
    rows = rows[index.bal_observed[rows] <= T]
    if len(rows) == 0:
        return None
    snap = rows[-1]
    t_rows, _ = index.tx_range(np.array([a]), index.bal_true[snap], T, lo_open=True)
    t_rows = t_rows[index.tx_observed[t_rows] <= T]
    return int(index.bal_balance[snap] + index.tx_signed[t_rows].sum())


def build_design_matrix(
    cohort: Sequence[tuple[str, str]],
    as_of: date,
    spec: FeatureSpec,
    ledger,
    *,
    with_labels: bool = True,
) -> DesignMatrix:
    """Features for the cohort in its given order, aligned with labels."""
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    index = ledger if isinstance(ledger, LedgerIndex) else LedgerIndex(ledger)
    acc = np.array([index.account_pos[a] for _, a in cohort], dtype=np.int64)
    for (cid, aid), a in zip(cohort, acc):
        if index.customer_ids[index.account_customer[a]] != cid:
            raise ValueError(f"cohort unit ({cid}, {aid}) names the wrong owner")
    X = feature_matrix(index, acc, as_of, spec)
    labels = label_accounts(index, acc, as_of) if with_labels else np.zeros(len(acc), dtype=bool)
    units = tuple(LabeledUnit(cid, aid, as_of, bool(y)) for (cid, aid), y in zip(cohort, labels))
    dm = DesignMatrix(FEATURE_COLUMNS, X, units, acc, labels_known=with_labels)
    if dm.X.shape != (len(units), len(FEATURE_COLUMNS)):
        raise AssertionError("feature rows and labeled units are misaligned")
    return dm


def write_features_csv(dm: DesignMatrix, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", "account_id", "as_of_date", *dm.columns])
        for u, row in zip(dm.units, dm.X):
            w.writerow([u.customer_id, u.account_id, u.as_of_date.isoformat(), *(int(v) for v in row)])


def save_feature_spec(spec: FeatureSpec, path: Path) -> None:
    Path(path).write_text(json.dumps({**spec.to_dict(), "columns": list(FEATURE_COLUMNS)}, indent=2) + "\n")

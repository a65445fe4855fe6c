"""Per-account columnar index over a dataset bundle.

Labeling, cohort building and feature extraction all ask the same questions
("which rows of account a have true_timestamp in [lo, hi]?") for thousands of
accounts at a time. Rows are kept in canonical (account, true_timestamp,
txn_id) order and addressed through a composite int64 key so that a whole
batch of range queries is one ``searchsorted`` call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .domain import AccountKind, DatasetBundle, Direction

_SHIFT = np.int64(1) << np.int64(33)  # timestamps stay below 2**33 until the year 2242


@dataclass(frozen=True)
class FeeMatcher:
    """Recognises a bank's overdraft-fee transactions by their description."""

    bank_id: str
    pattern: str
    mode: str = "exact"  # or "substring" (case-insensitive)

    def __post_init__(self):
        if self.mode not in ("exact", "substring"):
            raise ValueError(f"unknown matcher mode {self.mode!r}")
        if not self.pattern:
            raise ValueError("empty matcher pattern")

    def matches(self, description: str) -> bool:
        if self.mode == "exact":
            return description == self.pattern
        return self.pattern.casefold() in description.casefold()

    def to_dict(self) -> dict:
        return {"bank_id": self.bank_id, "pattern": self.pattern, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "FeeMatcher":
        return cls(d["bank_id"], d["pattern"], d.get("mode", "exact"))


def matchers_from_policies(policies) -> dict[str, FeeMatcher]:
    return {p.bank_id: FeeMatcher(p.bank_id, p.fee_description) for p in policies}


def check_matchers(matchers: dict[str, FeeMatcher], policies) -> None:
    """Every bank needs exactly one matcher, and it must accept the bank's fee text."""
    for p in policies:
        m = matchers.get(p.bank_id)
        if m is None:
            raise ValueError(f"no fee matcher for bank {p.bank_id}")
        if m.bank_id != p.bank_id:
            raise ValueError(f"matcher registered under {p.bank_id} names bank {m.bank_id}")
        if not m.matches(p.fee_description):
            raise ValueError(f"matcher for {p.bank_id} rejects its own fee description {p.fee_description!r}")


def _codes(values, categories) -> np.ndarray:
    codes = pd.Categorical(values, categories=categories).codes.astype(np.int64)
    if (codes < 0).any():
        raise ValueError("row references an account missing from the bundle")
    return codes


def gather_ranges(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the index ranges [lo_i, hi_i); also return the owning i per element."""
    lens = np.maximum(hi - lo, 0)
    owner = np.repeat(np.arange(len(lo)), lens)
    if len(owner) == 0:
        return np.zeros(0, dtype=np.int64), owner
    starts = np.cumsum(lens) - lens
    rows = np.arange(len(owner)) - starts[owner] + lo[owner]
    return rows.astype(np.int64), owner


class LedgerIndex:
    """Columnar, account-addressable view of a bundle. Read-only."""

    def __init__(self, bundle: DatasetBundle, matchers: dict[str, FeeMatcher] | None = None):
        self.bundle = bundle
        self.matchers = matchers if matchers is not None else matchers_from_policies(bundle.policies)
        check_matchers(self.matchers, bundle.policies)

        accounts = sorted(bundle.accounts, key=lambda a: a.account_id)
        self.account_ids = [a.account_id for a in accounts]
        self.account_pos = {a: i for i, a in enumerate(self.account_ids)}
        self.bank_ids = sorted({p.bank_id for p in bundle.policies})
        bank_pos = {b: i for i, b in enumerate(self.bank_ids)}
        self.account_bank = np.array([bank_pos[a.bank_id] for a in accounts], dtype=np.int64)
        self.account_kind = np.array([a.kind for a in accounts], dtype=object)
        self.is_checking = self.account_kind == AccountKind.CHECKING.value

        customers = sorted(bundle.customers, key=lambda c: c.customer_id)
        self.customer_ids = [c.customer_id for c in customers]
        self.customer_pos = {c: i for i, c in enumerate(self.customer_ids)}
        self.account_customer = np.array([self.customer_pos[a.customer_id] for a in accounts], dtype=np.int64)

        # accounts grouped by owning customer
        order = np.lexsort((np.arange(len(accounts)), self.account_customer))
        self.cust_accounts = order.astype(np.int64)
        self.cust_bounds = np.searchsorted(self.account_customer[order], np.arange(len(customers) + 1))

        # logins
        lens = np.array([len(c.login_timestamps) for c in customers], dtype=np.int64)
        self.login_bounds = np.concatenate([[0], np.cumsum(lens)])
        self.login_ts = (
            np.concatenate([np.asarray(c.login_timestamps, dtype=np.int64) for c in customers])
            if lens.sum()
            else np.zeros(0, dtype=np.int64)
        )

        # transactions (already in canonical order inside a bundle)
        tx = bundle.transactions
        self.tx_account = _codes(tx["account_id"], self.account_ids)
        self.tx_true = tx["true_timestamp"].to_numpy(dtype=np.int64)
        self.tx_observed = tx["observed_timestamp"].to_numpy(dtype=np.int64)
        self.tx_amount = tx["amount"].to_numpy(dtype=np.int64)
        self.tx_id = tx["txn_id"].to_numpy(dtype=np.int64)
        self.tx_credit = (tx["direction"] == Direction.CREDIT.value).to_numpy()
        self.tx_signed = np.where(self.tx_credit, self.tx_amount, -self.tx_amount)
        if len(self.tx_true) and (self.tx_true.min() < 0 or self.tx_true.max() >= _SHIFT):
            raise ValueError("timestamps before 1970 are not supported")
        self.tx_key = self.tx_account * _SHIFT + self.tx_true
        if len(self.tx_key) > 1 and (np.diff(self.tx_key) < 0).any():
            raise ValueError("transactions are not in canonical order; use sort_transactions")

        # fee detection: one boolean per (bank, description category)
        desc = pd.Categorical(tx["description"])
        labels = [str(d) for d in desc.categories]
        table = np.zeros((len(self.bank_ids), max(1, len(labels))), dtype=bool)
        for b, bank in enumerate(self.bank_ids):
            m = self.matchers[bank]
            table[b, : len(labels)] = [m.matches(d) for d in labels]
        codes = desc.codes.astype(np.int64)
        self.tx_fee = (table[self.account_bank[self.tx_account], np.maximum(codes, 0)] & (codes >= 0)) & ~self.tx_credit

        fee_rows = np.flatnonzero(self.tx_fee)
        self.fee_rows = fee_rows
        self.fee_key = self.tx_key[fee_rows]

        # balance snapshots
        bal = bundle.balances
        self.bal_account = _codes(bal["account_id"], self.account_ids)
        self.bal_true = bal["true_timestamp"].to_numpy(dtype=np.int64)
        self.bal_observed = bal["observed_timestamp"].to_numpy(dtype=np.int64)
        self.bal_balance = bal["balance"].to_numpy(dtype=np.int64)
        if len(self.bal_true) and (self.bal_true.min() < 0 or self.bal_true.max() >= _SHIFT):
            raise ValueError("timestamps before 1970 are not supported")
        self.bal_key = self.bal_account * _SHIFT + self.bal_true

    # -- range queries -----------------------------------------------------

    def tx_range(self, accounts: np.ndarray, lo_ts, hi_ts, *, lo_open: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Rows with true_timestamp in [lo_ts, hi_ts] (or (lo_ts, hi_ts]) per account."""
        return self._range(self.tx_key, accounts, lo_ts, hi_ts, lo_open)

    def fee_range(self, accounts: np.ndarray, lo_ts, hi_ts, *, lo_open: bool = False) -> tuple[np.ndarray, np.ndarray]:
        pos, owner = self._range(self.fee_key, accounts, lo_ts, hi_ts, lo_open)
        return self.fee_rows[pos], owner

    def bal_range(self, accounts: np.ndarray, lo_ts, hi_ts) -> tuple[np.ndarray, np.ndarray]:
        return self._range(self.bal_key, accounts, lo_ts, hi_ts, False)

    @staticmethod
    def _range(key, accounts, lo_ts, hi_ts, lo_open):
        accounts = np.asarray(accounts, dtype=np.int64)
        base = accounts * _SHIFT
        lo = np.searchsorted(key, base + np.asarray(lo_ts, dtype=np.int64), side="right" if lo_open else "left")
        hi = np.searchsorted(key, base + np.asarray(hi_ts, dtype=np.int64), side="right")
        return gather_ranges(lo, hi)

    def accounts_of(self, customers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All account indices of each customer, with the owning position."""
        customers = np.asarray(customers, dtype=np.int64)
        pos, owner = gather_ranges(self.cust_bounds[customers], self.cust_bounds[customers + 1])
        return self.cust_accounts[pos], owner

    def logins_of(self, customers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        customers = np.asarray(customers, dtype=np.int64)
        pos, owner = gather_ranges(self.login_bounds[customers], self.login_bounds[customers + 1])
        return self.login_ts[pos], owner

    def policy_of_account(self, account: int):
        return self.bundle.policy(self.bank_ids[self.account_bank[account]])

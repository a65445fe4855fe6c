"""Domain types, the dataset container, JSONL persistence and validation.

Money is integer cents everywhere. Timestamps are integer seconds since the
Unix epoch (UTC); day boundaries fall at 00:00 UTC. The two large tables
(transactions and balance snapshots) are held columnar in pandas frames whose
columns carry exactly the field names of :class:`Transaction` and
:class:`BalanceSnapshot`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

SECONDS_PER_DAY = 86_400
SECONDS_PER_HOUR = 3_600
EPOCH = date(1970, 1, 1)


class Direction(str, Enum):
    DEBIT = "debit"
    CREDIT = "credit"


class AccountKind(str, Enum):
    CHECKING = "checking"
    SAVINGS = "savings"
    CREDIT_CARD = "credit_card"
    CD = "cd"
    INVESTMENT = "investment"
    MONEY_MARKET = "money_market"


CATEGORIES = (
    "groceries",
    "dining",
    "shopping",
    "bill_pay",
    "check",
    "atm",
    "transfer",
    "paycheck",
    "fee",
    "other",
)

TRANSACTION_COLUMNS = (
    "txn_id",
    "account_id",
    "true_timestamp",
    "observed_timestamp",
    "amount",
    "direction",
    "description",
    "category",
)
BALANCE_COLUMNS = ("account_id", "true_timestamp", "observed_timestamp", "balance")


class DatasetLoadError(Exception):
    """The dataset files could not be read or parsed."""


class DatasetValidationError(ValueError):
    """A dataset was readable but breaks one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"{len(self.violations)} dataset violation(s): {head}")


# -- time helpers -----------------------------------------------------------


def day_start(d: date) -> int:
    """Epoch seconds of 00:00 UTC on ``d``."""
    return (d - EPOCH).days * SECONDS_PER_DAY


def ts_to_date(ts: int) -> date:
    return EPOCH + timedelta(days=int(ts) // SECONDS_PER_DAY)


def to_rfc3339(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_rfc3339(text: str) -> int:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        raise ValueError(f"timestamp without timezone: {text!r}")
    return int(dt.timestamp())


def weekday_of(ts):
    """Monday=0 .. Sunday=6; works on scalars and integer arrays."""
    # 1970-01-01 was a Thursday
    return (np.floor_divide(ts, SECONDS_PER_DAY) + 3) % 7


def _ts_array_to_text(ts: np.ndarray) -> np.ndarray:
    out = np.datetime_as_string(np.asarray(ts, dtype="int64").astype("datetime64[s]"), unit="s")
    return np.char.add(out, "Z")


def _text_array_to_ts(values) -> np.ndarray:
    arr = np.asarray([v[:-1] if v.endswith("Z") else v for v in values], dtype="datetime64[s]")
    return arr.astype("int64")


# -- record types -----------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    txn_id: int
    account_id: str
    true_timestamp: int
    observed_timestamp: int
    amount: int
    direction: str
    description: str
    category: str

    @property
    def signed_amount(self) -> int:
        return self.amount if self.direction == Direction.CREDIT.value else -self.amount


@dataclass(frozen=True)
class BalanceSnapshot:
    account_id: str
    true_timestamp: int
    observed_timestamp: int
    balance: int


@dataclass(frozen=True)
class Account:
    account_id: str
    customer_id: str
    bank_id: str
    kind: str


@dataclass(frozen=True)
class Customer:
    customer_id: str
    account_ids: tuple[str, ...]
    login_timestamps: tuple[int, ...] = ()


@dataclass(frozen=True)
class TxnLag:
    """Uniform observation lag in whole hours, inclusive on both ends."""

    min_hours: int = 2
    max_hours: int = 48

    def __post_init__(self):
        if not 0 <= self.min_hours <= self.max_hours:
            raise ValueError(f"bad lag range {self.min_hours}..{self.max_hours}")


@dataclass(frozen=True)
class BankPolicy:
    bank_id: str
    fee_amount: int
    overdraft_threshold: int
    max_fees_per_day: int
    fee_description: str
    txn_lag: TxnLag = field(default_factory=TxnLag)
    weekend_blackout: bool = False
    balance_lag_extra: int = 0  # hours

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BankPolicy":
        d = dict(d)
        d["txn_lag"] = TxnLag(**d.get("txn_lag", {}))
        return cls(**d)


def transactions_frame(txns: Iterable[Transaction]) -> pd.DataFrame:
    rows = [asdict(t) for t in txns]
    frame = pd.DataFrame(rows, columns=list(TRANSACTION_COLUMNS))
    return _coerce_txn_frame(frame)


def balances_frame(snaps: Iterable[BalanceSnapshot]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(s) for s in snaps], columns=list(BALANCE_COLUMNS))
    return _coerce_balance_frame(frame)


def canonical_category(values) -> pd.Categorical:
    """String column as a categorical whose categories are the sorted values present.

    Keeps multi-million-row ledgers small and makes frames compare equal
    after a save/load round trip.
    """
    if isinstance(values, pd.Series):
        values = values.array
    if isinstance(values, pd.Categorical):
        cat = values.remove_unused_categories()
        if any(not isinstance(c, str) for c in cat.categories):
            return pd.Categorical(np.asarray(cat, dtype=object).astype(str))
        cats = list(cat.categories)
        if cats != sorted(cats):
            cat = cat.reorder_categories(sorted(cats))
        return cat
    return pd.Categorical(np.asarray(values, dtype=object).astype(str))


def concat_frames(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Concatenate frames keeping string columns categorical (union of categories)."""
    frames = [f for f in frames if len(f)] or list(frames[:1])
    cat_cols = [c for c in frames[0].columns if isinstance(frames[0][c].dtype, pd.CategoricalDtype)]
    aligned = []
    for col in cat_cols:
        cats = sorted(set().union(*(set(map(str, pd.Categorical(f[col]).categories)) for f in frames)))
        for f in frames:
            if not isinstance(f[col].dtype, pd.CategoricalDtype):
                f[col] = pd.Categorical(f[col].astype(str))
        aligned.append((col, cats))
    parts = []
    for f in frames:
        f = f.copy()
        for col, cats in aligned:
            f[col] = pd.Categorical(f[col]).set_categories(cats)
        parts.append(f)
    return pd.concat(parts, ignore_index=True)


def _coerce_txn_frame(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.loc[:, list(TRANSACTION_COLUMNS)].copy()
    for col in ("txn_id", "true_timestamp", "observed_timestamp", "amount"):
        frame[col] = frame[col].astype("int64")
    for col in ("account_id", "direction", "description", "category"):
        frame[col] = canonical_category(frame[col])
    return frame.reset_index(drop=True)


def _coerce_balance_frame(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.loc[:, list(BALANCE_COLUMNS)].copy()
    frame["account_id"] = canonical_category(frame["account_id"])
    for col in ("true_timestamp", "observed_timestamp", "balance"):
        frame[col] = frame[col].astype("int64")
    return frame.reset_index(drop=True)


def iter_transactions(frame: pd.DataFrame) -> Iterator[Transaction]:
    for row in frame.itertuples(index=False):
        yield Transaction(
            int(row.txn_id),
            str(row.account_id),
            int(row.true_timestamp),
            int(row.observed_timestamp),
            int(row.amount),
            str(row.direction),
            str(row.description),
            str(row.category),
        )


def sort_transactions(frame: pd.DataFrame) -> pd.DataFrame:
    """Canonical ledger order (account_id, true_timestamp, txn_id) with canonical dtypes."""
    frame = _coerce_txn_frame(frame)
    order = np.lexsort(
        (frame["txn_id"].to_numpy(), frame["true_timestamp"].to_numpy(), frame["account_id"].cat.codes.to_numpy())
    )
    return frame.iloc[order].reset_index(drop=True)


def sort_balances(frame: pd.DataFrame) -> pd.DataFrame:
    frame = _coerce_balance_frame(frame)
    order = np.lexsort(
        (
            frame["observed_timestamp"].to_numpy(),
            frame["true_timestamp"].to_numpy(),
            frame["account_id"].cat.codes.to_numpy(),
        )
    )
    return frame.iloc[order].reset_index(drop=True)


def _account_codes(frame: pd.DataFrame) -> np.ndarray:
    col = frame["account_id"]
    if isinstance(col.dtype, pd.CategoricalDtype):
        sorted_cats = list(col.cat.categories) == sorted(col.cat.categories)
        if sorted_cats:
            return col.cat.codes.to_numpy()
    _, codes = np.unique(col.to_numpy().astype(str), return_inverse=True)
    return codes


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Everything a pipeline run reads: population, ledger, balances, policies.

    ``end`` is exclusive: the data covers ``start 00:00`` up to ``end 00:00``.
    The frames are treated as immutable; every transformation returns a new
    bundle.
    """

    customers: tuple[Customer, ...]
    accounts: tuple[Account, ...]
    transactions: pd.DataFrame
    balances: pd.DataFrame
    policies: tuple[BankPolicy, ...]
    seed: int
    start: date
    end: date

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.customers == other.customers
            and self.accounts == other.accounts
            and self.policies == other.policies
            and self.seed == other.seed
            and self.start == other.start
            and self.end == other.end
            and self.transactions.equals(other.transactions)
            and self.balances.equals(other.balances)
        )

    __hash__ = None

    def replace(self, **changes) -> "DatasetBundle":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return DatasetBundle(**values)

    def policy(self, bank_id: str) -> BankPolicy:
        for p in self.policies:
            if p.bank_id == bank_id:
                return p
        raise KeyError(bank_id)

    @property
    def account_map(self) -> dict[str, Account]:
        return {a.account_id: a for a in self.accounts}

    @property
    def customer_map(self) -> dict[str, Customer]:
        return {c.customer_id: c for c in self.customers}


# -- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    ref: str
    detail: str = ""

    def __str__(self):
        return f"{self.rule}[{self.ref}]" + (f": {self.detail}" if self.detail else "")


def _frame_violations(frame, mask, rule, id_col, detail) -> list[Violation]:
    bad = np.flatnonzero(np.asarray(mask))
    return [Violation(rule, str(frame[id_col].iloc[i]), detail) for i in bad]


def validate_dataset(bundle: DatasetBundle) -> list[Violation]:
    """Check every type invariant; an empty list means the bundle is valid."""
    out: list[Violation] = []

    policy_ids = [p.bank_id for p in bundle.policies]
    seen_desc: set[str] = set()
    for p in bundle.policies:
        if p.fee_amount <= 0:
            out.append(Violation("policy.fee_amount", p.bank_id, "fee_amount must be > 0"))
        if p.overdraft_threshold > 0:
            out.append(Violation("policy.threshold", p.bank_id, "threshold must be <= 0"))
        if p.max_fees_per_day < 1:
            out.append(Violation("policy.max_fees", p.bank_id, "cap must be >= 1"))
        if not p.fee_description:
            out.append(Violation("policy.fee_description", p.bank_id, "empty description"))
        elif p.fee_description in seen_desc:
            out.append(Violation("policy.fee_description", p.bank_id, "description not unique"))
        seen_desc.add(p.fee_description)
    if len(set(policy_ids)) != len(policy_ids):
        out.append(Violation("policy.duplicate", ",".join(sorted(policy_ids)), "duplicate bank_id"))

    kinds = {k.value for k in AccountKind}
    customer_ids = {c.customer_id for c in bundle.customers}
    accounts = {}
    for a in bundle.accounts:
        if a.account_id in accounts:
            out.append(Violation("account.duplicate", a.account_id))
        accounts[a.account_id] = a
        if a.kind not in kinds:
            out.append(Violation("account.kind", a.account_id, f"unknown kind {a.kind!r}"))
        if a.bank_id not in policy_ids:
            out.append(Violation("account.unknown_bank", a.account_id, a.bank_id))
        if a.customer_id not in customer_ids:
            out.append(Violation("account.unknown_customer", a.account_id, a.customer_id))

    for c in bundle.customers:
        for aid in c.account_ids:
            acct = accounts.get(aid)
            if acct is None:
                out.append(Violation("customer.unknown_account", c.customer_id, aid))
            elif acct.customer_id != c.customer_id:
                out.append(Violation("customer.account_owner", c.customer_id, aid))
        logins = np.asarray(c.login_timestamps, dtype="int64")
        if logins.size > 1 and np.any(np.diff(logins) < 0):
            out.append(Violation("customer.logins_unordered", c.customer_id))

    tx = bundle.transactions
    if len(tx):
        out += _frame_violations(tx, tx["amount"].to_numpy() <= 0, "txn.amount", "txn_id", "amount must be > 0")
        out += _frame_violations(
            tx, ~tx["direction"].isin([d.value for d in Direction]).to_numpy(), "txn.direction", "txn_id", "bad direction"
        )
        out += _frame_violations(
            tx, ~tx["category"].isin(CATEGORIES).to_numpy(), "txn.category", "txn_id", "unknown category"
        )
        out += _frame_violations(
            tx,
            tx["observed_timestamp"].to_numpy() < tx["true_timestamp"].to_numpy(),
            "txn.observed_before_true",
            "txn_id",
            "observed_timestamp < true_timestamp",
        )
        out += _frame_violations(
            tx, tx["txn_id"].duplicated(keep="first").to_numpy(), "txn.duplicate_id", "txn_id", "txn_id not unique"
        )
        out += _frame_violations(
            tx, ~tx["account_id"].isin(list(accounts)).to_numpy(), "txn.unknown_account", "txn_id", "dangling account_id"
        )
        acct = _account_codes(tx)
        ts = tx["true_timestamp"].to_numpy()
        same = acct[1:] == acct[:-1]
        unordered = (acct[1:] < acct[:-1]) | (same & (ts[1:] < ts[:-1]))
        out += _frame_violations(
            tx.iloc[1:], unordered, "txn.order", "txn_id", "not sorted by (account_id, true_timestamp)"
        )

    bal = bundle.balances
    if len(bal):
        out += _frame_violations(
            bal,
            bal["observed_timestamp"].to_numpy() < bal["true_timestamp"].to_numpy(),
            "balance.observed_before_true",
            "account_id",
            "observed_timestamp < true_timestamp",
        )
        out += _frame_violations(
            bal, ~bal["account_id"].isin(list(accounts)).to_numpy(), "balance.unknown_account", "account_id", "dangling"
        )
        acct = _account_codes(bal)
        ts = bal["true_timestamp"].to_numpy()
        same = acct[1:] == acct[:-1]
        unordered = (acct[1:] < acct[:-1]) | (same & (ts[1:] < ts[:-1]))
        out += _frame_violations(bal.iloc[1:], unordered, "balance.order", "account_id", "snapshots not ordered")

    return out


def require_valid(bundle: DatasetBundle) -> DatasetBundle:
    violations = validate_dataset(bundle)
    if violations:
        raise DatasetValidationError(violations)
    return bundle


# -- persistence ------------------------------------------------------------

DATASET_FILES = (
    "customers.jsonl",
    "accounts.jsonl",
    "transactions.jsonl",
    "balances.jsonl",
    "policies.json",
    "dataset.json",
)


_CHUNK_ROWS = 250_000


def _write_frame_jsonl(frame: pd.DataFrame, path: Path) -> None:
    # written in slices so a multi-million-row frame never becomes one string
    with open(path, "w", encoding="utf-8") as fh:
        for lo in range(0, len(frame), _CHUNK_ROWS):
            out = frame.iloc[lo : lo + _CHUNK_ROWS].copy()
            for col in ("true_timestamp", "observed_timestamp"):
                out[col] = _ts_array_to_text(out[col].to_numpy())
            text = out.to_json(orient="records", lines=True)
            fh.write(text if text.endswith("\n") else text + "\n")


def _read_frame_jsonl(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    if path.stat().st_size == 0:
        return pd.DataFrame({c: np.zeros(0, dtype="int64") if c.endswith("timestamp") else [] for c in columns})
    parts = []
    reader = pd.read_json(path, lines=True, chunksize=_CHUNK_ROWS, dtype=False, convert_dates=False, encoding="utf-8")
    with reader:
        for chunk in reader:
            missing = [c for c in columns if c not in chunk.columns]
            if missing:
                raise KeyError(f"{path.name} lacks field(s) {missing}")
            chunk = chunk.loc[:, list(columns)]
            for col in ("true_timestamp", "observed_timestamp"):
                chunk[col] = _text_array_to_ts(chunk[col].tolist())
            for col in chunk.columns:
                if chunk[col].dtype == object:
                    chunk[col] = pd.Categorical(chunk[col])
            parts.append(chunk)
    return concat_frames(parts)


def save_bundle(bundle: DatasetBundle, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "customers.jsonl", "w", encoding="utf-8") as fh:
        for c in bundle.customers:
            rec = {
                "customer_id": c.customer_id,
                "account_ids": list(c.account_ids),
                "login_timestamps": list(_ts_array_to_text(np.asarray(c.login_timestamps, dtype="int64"))),
            }
            fh.write(json.dumps(rec) + "\n")
    with open(directory / "accounts.jsonl", "w", encoding="utf-8") as fh:
        for a in bundle.accounts:
            fh.write(json.dumps(asdict(a)) + "\n")
    _write_frame_jsonl(bundle.transactions, directory / "transactions.jsonl")
    _write_frame_jsonl(bundle.balances, directory / "balances.jsonl")
    (directory / "policies.json").write_text(
        json.dumps([p.to_dict() for p in bundle.policies], indent=2) + "\n", encoding="utf-8"
    )
    meta = {"seed": bundle.seed, "start": bundle.start.isoformat(), "end": bundle.end.isoformat()}
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return [directory / name for name in DATASET_FILES]


def load_bundle(directory) -> DatasetBundle:
    """Read a bundle back; raises :class:`DatasetLoadError` on unreadable input."""
    directory = Path(directory)
    missing = [n for n in DATASET_FILES if not (directory / n).is_file()]
    if missing:
        raise DatasetLoadError(f"missing dataset file(s) in {directory}: {', '.join(missing)}")
    try:
        customers = []
        for line in (directory / "customers.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            logins = rec.get("login_timestamps", [])
            customers.append(
                Customer(
                    rec["customer_id"],
                    tuple(rec["account_ids"]),
                    tuple(int(t) for t in _text_array_to_ts(logins)) if logins else (),
                )
            )
        accounts = [
            Account(**json.loads(line))
            for line in (directory / "accounts.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        tx = _coerce_txn_frame(_read_frame_jsonl(directory / "transactions.jsonl", TRANSACTION_COLUMNS))
        bal = _coerce_balance_frame(_read_frame_jsonl(directory / "balances.jsonl", BALANCE_COLUMNS))
        policies = tuple(
            BankPolicy.from_dict(d) for d in json.loads((directory / "policies.json").read_text(encoding="utf-8"))
        )
        meta = json.loads((directory / "dataset.json").read_text(encoding="utf-8"))
        return DatasetBundle(
            customers=tuple(customers),
            accounts=tuple(accounts),
            transactions=tx,
            balances=bal,
            policies=policies,
            seed=int(meta["seed"]),
            start=date.fromisoformat(meta["start"]),
            end=date.fromisoformat(meta["end"]),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetLoadError(f"cannot read dataset in {directory}: {exc}") from exc

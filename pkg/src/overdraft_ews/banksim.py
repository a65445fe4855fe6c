"""Synthetic populations and per-bank ledger mechanics.

The simulation runs in three stages that mirror how a bank and an aggregator
see the same money:

1. :func:`generate_population` draws customers, accounts and a raw ledger
   (no fee transactions). Spending reacts to the running balance, so the
   generator posts each day internally with the same engine as stage 2.
2. :func:`assess_fees` replays the raw ledger through nightly posting
   (credits, then debits largest first) and inserts fee transactions.
3. :func:`apply_observation_lag` stamps every event with the time the app
   would first see it.

:func:`post_day` is the one-account, one-day reference implementation; the
vectorised engine is checked against it in the test-suite.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .domain import (
    SECONDS_PER_DAY,
    SECONDS_PER_HOUR,
    Account,
    AccountKind,
    BankPolicy,
    Customer,
    DatasetBundle,
    Direction,
    Transaction,
    TxnLag,
    canonical_category,
    concat_frames,
    day_start,
    sort_balances,
    sort_transactions,
    weekday_of,
)

LOOKBACK_DAYS = 183
MIN_SPAN_DAYS = LOOKBACK_DAYS + 12 * 7 + 14
END_OF_DAY = SECONDS_PER_DAY - 1
SPEND_SIGMA = 0.6  # log-sd of discretionary purchase amounts

# Friday 18:00 UTC through Monday 06:00 UTC, as seconds since Monday 00:00
BLACKOUT_START = 4 * SECONDS_PER_DAY + 18 * SECONDS_PER_HOUR
BLACKOUT_END = 7 * SECONDS_PER_DAY + 6 * SECONDS_PER_HOUR
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY


class SimConfigError(ValueError):
    pass


class PostingContractError(ValueError):
    """post_day was handed transactions from more than one account-day."""


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ArchetypeConfig:
    """Behavioural profile; every range is a closed uniform support.

    Money ranges are cents, ``buffer_target`` and ``shock_size`` are in months
    of income. ``hard_floor`` makes the customer skip spending that would take
    the balance below the floor (a transfer from savings covers bills).
    """

    name: str
    share: float
    paycheck_amount: tuple[int, int]
    spend_ratio: tuple[float, float]
    start_balance: tuple[int, int]
    login_rate: tuple[float, float]
    paycheck_periods: tuple[int, ...] = (7, 14)
    buffer_target: tuple[float, float] = (0.0, 0.2)
    txn_rate: tuple[float, float] = (0.6, 1.4)
    bill_share: tuple[float, float] = (0.3, 0.45)
    reactivity: tuple[float, float] = (1.0, 3.0)
    shock_prob: tuple[float, float] = (0.0, 0.0)  # per-day chance of an unplanned expense
    shock_size: tuple[float, float] = (0.2, 0.6)
    login_response: float = 0.5
    cure_prob: float = 1.0  # chance per day an overdrawn customer moves money in to cover it
    cure_cushion: tuple[float, float] = (0.0, 0.2)
    hard_floor: int | None = None
    savings_prob: float = 0.5
    credit_card_rate: float = 1.0
    cd_prob: float = 0.03
    investment_prob: float = 0.1
    second_checking_prob: float = 0.05

    def __post_init__(self):
        for name in ("paycheck_amount", "spend_ratio", "start_balance", "login_rate",
                     "buffer_target", "txn_rate", "bill_share", "reactivity", "shock_size", "shock_prob",
                     "cure_cushion"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise SimConfigError(f"{self.name}.{name}: bad support ({lo}, {hi})")
        if not 0.0 <= self.shock_prob[0] <= self.shock_prob[1] <= 1.0:
            raise SimConfigError(f"{self.name}: shock_prob must lie in [0, 1]")
        if not 0.0 <= self.cure_prob <= 1.0:
            raise SimConfigError(f"{self.name}: cure_prob must lie in [0, 1]")
        if not 0.0 <= self.share <= 1.0:
            raise SimConfigError(f"{self.name}: share {self.share} outside [0, 1]")
        if not self.paycheck_periods or min(self.paycheck_periods) < 1:
            raise SimConfigError(f"{self.name}: paycheck_periods must be positive")


DEFAULT_ARCHETYPES = (
    ArchetypeConfig(
        name="chronic_overdrafter",
        share=0.022,
        paycheck_amount=(20_000, 400_000),
        spend_ratio=(0.97, 1.02),
        start_balance=(0, 30_000),
        login_rate=(0.02, 0.25),
        paycheck_periods=(7, 30),
        buffer_target=(0.0, 0.3),
        txn_rate=(0.8, 1.8),
        bill_share=(0.4, 0.65),
        reactivity=(1.0, 8.0),
        shock_prob=(0.0, 0.05),
        login_response=0.8,
        cure_prob=0.7,
        savings_prob=0.2,
        credit_card_rate=0.6,
        cd_prob=0.0,
        investment_prob=0.02,
    ),
    ArchetypeConfig(
        name="occasional_overdrafter",
        share=0.37,
        paycheck_amount=(20_000, 400_000),
        spend_ratio=(0.95, 1.00),
        start_balance=(20_000, 150_000),
        login_rate=(0.1, 0.6),
        paycheck_periods=(14,),
        buffer_target=(0.5, 1.0),
        txn_rate=(0.8, 1.6),
        bill_share=(0.4, 0.65),
        reactivity=(3.0, 6.0),
        shock_prob=(0.0, 0.01),
        login_response=0.4,
        cure_prob=0.9,
        savings_prob=0.5,
        credit_card_rate=1.2,
        cd_prob=0.03,
        investment_prob=0.1,
    ),
    ArchetypeConfig(
        name="stable",
        share=0.608,
        paycheck_amount=(90_000, 300_000),
        spend_ratio=(0.7, 0.9),
        start_balance=(300_000, 1_500_000),
        login_rate=(0.1, 0.8),
        buffer_target=(1.0, 3.0),
        txn_rate=(0.8, 1.6),
        bill_share=(0.25, 0.4),
        reactivity=(1.0, 3.0),
        shock_prob=(0.0, 0.006),
        login_response=0.5,
        hard_floor=0,
        savings_prob=0.8,
        credit_card_rate=1.8,
        cd_prob=0.1,
        investment_prob=0.4,
    ),
)

DEFAULT_POLICIES = (
    BankPolicy(
        bank_id="bank_a",
        fee_amount=3_500,
        overdraft_threshold=0,
        max_fees_per_day=3,
        fee_description="OVERDRAFT ITEM FEE",
        txn_lag=TxnLag(2, 48),
        weekend_blackout=False,
        balance_lag_extra=12,
    ),
    BankPolicy(
        bank_id="bank_b",
        fee_amount=3_400,
        overdraft_threshold=-5_000,
        max_fees_per_day=4,
        fee_description="OD/OVERDRAFT PAID ITEM",
        txn_lag=TxnLag(2, 48),
        weekend_blackout=True,
        balance_lag_extra=24,
    ),
    BankPolicy(
        bank_id="bank_c",
        fee_amount=3_600,
        overdraft_threshold=0,
        max_fees_per_day=6,
        fee_description="INSUFFICIENT FUNDS FEE",
        txn_lag=TxnLag(2, 48),
        weekend_blackout=False,
        balance_lag_extra=6,
    ),
)


@dataclass(frozen=True)
class BankPopulation:
    policy: BankPolicy
    n_customers: int


@dataclass(frozen=True)
class SimConfig:
    seed: int
    start: date
    end: date
    banks: tuple[BankPopulation, ...]
    archetypes: tuple[ArchetypeConfig, ...] = DEFAULT_ARCHETYPES
    snapshot_every_days: int = 1
    credits_first: bool = True

    def __post_init__(self):
        total = sum(a.share for a in self.archetypes)
        if abs(total - 1.0) > 1e-9:
            raise SimConfigError(f"archetype shares sum to {total}, expected 1")
        if (self.end - self.start).days < MIN_SPAN_DAYS:
            raise SimConfigError(
                f"date range spans {(self.end - self.start).days} days; need >= {MIN_SPAN_DAYS} "
                "(183-day look-back plus 12 weekly backtest points)"
            )
        if not self.banks:
            raise SimConfigError("no banks configured")
        ids = [b.policy.bank_id for b in self.banks]
        if len(set(ids)) != len(ids):
            raise SimConfigError("duplicate bank_id")
        if self.snapshot_every_days < 1:
            raise SimConfigError("snapshot_every_days must be >= 1")

    @property
    def policies(self) -> tuple[BankPolicy, ...]:
        return tuple(b.policy for b in self.banks)

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "banks": [{"policy": b.policy.to_dict(), "n_customers": b.n_customers} for b in self.banks],
            "archetypes": [asdict(a) for a in self.archetypes],
            "snapshot_every_days": self.snapshot_every_days,
            "credits_first": self.credits_first,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        archetypes = tuple(
            ArchetypeConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
            for a in d.get("archetypes", [asdict(a) for a in DEFAULT_ARCHETYPES])
        )
        return cls(
            seed=int(d["seed"]),
            start=date.fromisoformat(d["start"]),
            end=date.fromisoformat(d["end"]),
            banks=tuple(BankPopulation(BankPolicy.from_dict(b["policy"]), int(b["n_customers"])) for b in d["banks"]),
            archetypes=archetypes,
            snapshot_every_days=int(d.get("snapshot_every_days", 1)),
            credits_first=bool(d.get("credits_first", True)),
        )


def default_sim_config(
    seed: int = 2020,
    n_customers: int = 10_000,
    start: date = date(2019, 9, 6),
    end: date = date(2020, 9, 25),
    archetypes: Sequence[ArchetypeConfig] = DEFAULT_ARCHETYPES,
    policies: Sequence[BankPolicy] = DEFAULT_POLICIES,
) -> SimConfig:
    """Default population: customers split evenly over the default banks.

    The default range gives 27 Friday train/test pairs once the 183-day
    look-back and two label weeks are carved off.
    """
    per_bank = [n_customers // len(policies)] * len(policies)
    for i in range(n_customers - sum(per_bank)):
        per_bank[i] += 1
    return SimConfig(
        seed=seed,
        start=start,
        end=end,
        banks=tuple(BankPopulation(p, n) for p, n in zip(policies, per_bank)),
        archetypes=tuple(archetypes),
    )


# -- posting ----------------------------------------------------------------


@dataclass(frozen=True)
class PostedDay:
    posted: tuple[Transaction, ...]
    closing_balance: int
    balances_after: tuple[int, ...]


def posting_order_key(txn: Transaction, credits_first: bool = True):
    is_debit = txn.direction == Direction.DEBIT.value
    group = int(is_debit) if credits_first else int(not is_debit)
    return (group, -txn.amount if is_debit else 0, txn.txn_id)


def post_day(
    transactions: Sequence[Transaction],
    policy: BankPolicy,
    opening_balance: int,
    *,
    credits_first: bool = True,
    fee_ids: Iterable[int] | None = None,
) -> PostedDay:
    """Post one account's transactions for one UTC day.

    Credits post first, then debits from the largest amount down (equal
    amounts by ``txn_id``). After each debit that leaves the balance strictly
    below ``policy.overdraft_threshold`` a fee transaction is inserted, at most
    ``policy.max_fees_per_day`` times. Fee transactions never trigger fees.

    ``fee_ids`` supplies ids for inserted fees; by default they continue after
    the largest id of the day, which is only unique within the day.
    """
    txns = list(transactions)
    if txns:
        days = {t.true_timestamp // SECONDS_PER_DAY for t in txns}
        accounts = {t.account_id for t in txns}
        if len(days) != 1 or len(accounts) != 1:
            raise PostingContractError(
                f"post_day needs a single account-day, got {len(accounts)} account(s) over {len(days)} day(s)"
            )
    if fee_ids is None:
        fee_ids = itertools.count(max((t.txn_id for t in txns), default=0) + 1)
    fee_ids = iter(fee_ids)

    balance = int(opening_balance)
    fees_today = 0
    posted: list[Transaction] = []
    after: list[int] = []
    for txn in sorted(txns, key=lambda t: posting_order_key(t, credits_first)):
        balance += txn.signed_amount
        posted.append(txn)
        after.append(balance)
        if (
            txn.direction == Direction.DEBIT.value
            and balance < policy.overdraft_threshold
            and fees_today < policy.max_fees_per_day
        ):
            ts = (txn.true_timestamp // SECONDS_PER_DAY) * SECONDS_PER_DAY + END_OF_DAY
            fee = Transaction(
                txn_id=next(fee_ids),
                account_id=txn.account_id,
                true_timestamp=ts,
                observed_timestamp=ts,
                amount=policy.fee_amount,
                direction=Direction.DEBIT.value,
                description=policy.fee_description,
                category="fee",
            )
            balance -= policy.fee_amount
            fees_today += 1
            posted.append(fee)
            after.append(balance)
    return PostedDay(tuple(posted), balance, tuple(after))


def _group_cumsum(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Cumulative sum restarting at every index flagged in ``starts``."""
    cs = np.cumsum(values)
    first = np.maximum.accumulate(np.where(starts, np.arange(len(values)), 0))
    return cs - (cs - values)[first]


@dataclass
class _DayPosting:
    fire: np.ndarray  # bool per row: a fee follows this debit
    balance_after: np.ndarray  # balance after the row itself (before its fee)
    fees_before_incl: np.ndarray  # fees fired up to and including this row
    net: np.ndarray  # per-account net change including fees
    pos_in_group: np.ndarray  # row index within its account


def _post_rows(acct, amount, is_credit, opening, thr, fee, cap, n_accounts) -> _DayPosting:
    """Vectorised posting for rows already in posting order, grouped by account.

    Running balances only fall through the debit run, so once a debit leaves
    an account below its threshold every later debit that day does too; the
    fee rule is therefore "the first ``cap`` debits that end below threshold".
    """
    n = len(acct)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return _DayPosting(np.zeros(0, dtype=bool), z, z, np.zeros(n_accounts, dtype=np.int64), z)
    starts = np.ones(n, dtype=bool)
    starts[1:] = acct[1:] != acct[:-1]
    signed = np.where(is_credit, amount, -amount)
    running = opening[acct] + _group_cumsum(signed, starts)
    below = (~is_credit) & (running < thr[acct])
    rank = _group_cumsum(below.astype(np.int64), starts) - 1
    fire = below & (rank < cap[acct])
    fired = _group_cumsum(fire.astype(np.int64), starts)
    balance_after = running - fee[acct] * (fired - fire)
    net = np.bincount(acct, weights=signed, minlength=n_accounts).astype(np.int64)
    nfees = np.bincount(acct, weights=fire, minlength=n_accounts).astype(np.int64)
    net -= nfees * fee
    pos = _group_cumsum(np.ones(n, dtype=np.int64), starts) - 1
    return _DayPosting(fire, balance_after, fired, net, pos)


def _posting_sort(acct, is_credit, amount, txn_id, credits_first: bool) -> np.ndarray:
    group = np.where(is_credit, 0, 1) if credits_first else np.where(is_credit, 1, 0)
    amt_key = np.where(is_credit, 0, -amount)
    return np.lexsort((txn_id, amt_key, group, acct))


# -- population -------------------------------------------------------------

_DESCRIPTIONS = {
    "groceries": ("GROCERY MART #12", "FRESH FOODS MARKET", "SAVE-A-LOT #301"),
    "dining": ("COFFEE SHOP #12", "BURGER PALACE", "PIZZA CORNER"),
    "shopping": ("ONLINE MARKETPLACE", "DEPT STORE #88", "PHARMACY #4410"),
    "atm": ("ATM WITHDRAWAL",),
    "check": ("CHECK PAID",),
    "bill_pay": ("ONLINE BILL PAY RENT", "UTILITY AUTOPAY", "INSURANCE PREMIUM"),
    "other": ("AUTO REPAIR SVC", "MEDICAL CENTER", "VET CLINIC"),
    "paycheck": ("PAYROLL DIRECT DEP",),
    "transfer": ("ONLINE TRANSFER FROM SAVINGS",),
}
_SPEND_CATEGORIES = ("groceries", "dining", "shopping", "atm", "check")
_SPEND_WEIGHTS = np.array([0.35, 0.25, 0.25, 0.1, 0.05])
# generator-internal category codes: the spend categories first, in order
_GEN_CATEGORIES = _SPEND_CATEGORIES + ("paycheck", "bill_pay", "other", "transfer")
_CAT = {c: i for i, c in enumerate(_GEN_CATEGORIES)}
_ATM = _CAT["atm"]


@dataclass
class _Accounts:
    """Per-checking-account simulation parameters (parallel arrays)."""

    account_ids: list
    customer_idx: np.ndarray
    bank_idx: np.ndarray
    arche_idx: np.ndarray
    pay: np.ndarray
    period: np.ndarray
    phase: np.ndarray
    monthly: np.ndarray
    start_balance: np.ndarray
    target: np.ndarray
    spend_ratio: np.ndarray
    txn_rate: np.ndarray
    bill_amount: np.ndarray
    bill_day: np.ndarray
    reactivity: np.ndarray
    shock_prob: np.ndarray
    shock_lo: np.ndarray
    shock_hi: np.ndarray
    login_response: np.ndarray
    cure_prob: np.ndarray
    cure_lo: np.ndarray
    cure_hi: np.ndarray
    floor: np.ndarray
    has_floor: np.ndarray
    disc_daily: np.ndarray | None = None


def _uniform(rng, support, size):
    lo, hi = support
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, float(lo))


def _draw_population(config: SimConfig, rng: np.random.Generator):
    archetypes = config.archetypes
    shares = np.array([a.share for a in archetypes])
    customers, accounts = [], []
    cust_arche, cust_bank = [], []
    checking_owner, checking_scale = [], []
    checking_ids = []
    account_seq = 0
    for b_idx, pop in enumerate(config.banks):
        kinds = rng.choice(len(archetypes), size=pop.n_customers, p=shares)
        for a_idx in kinds:
            arche = archetypes[a_idx]
            c_idx = len(customers)
            customer_id = f"c{c_idx + 1:06d}"
            owned = []

            def new_account(kind):
                nonlocal account_seq
                account_seq += 1
                acct = Account(f"a{account_seq:07d}", customer_id, pop.policy.bank_id, kind)
                accounts.append(acct)
                owned.append(acct.account_id)
                return acct

            n_checking = 1 + int(rng.random() < arche.second_checking_prob)
            for j in range(n_checking):
                acct = new_account(AccountKind.CHECKING.value)
                checking_ids.append(acct.account_id)
                checking_owner.append(c_idx)
                checking_scale.append(1.0 if j == 0 else 0.35)
            if rng.random() < arche.savings_prob:
                new_account(AccountKind.SAVINGS.value)
            for _ in range(int(rng.poisson(arche.credit_card_rate))):
                new_account(AccountKind.CREDIT_CARD.value)
            if rng.random() < arche.cd_prob:
                new_account(AccountKind.CD.value)
            if rng.random() < arche.investment_prob:
                new_account(AccountKind.INVESTMENT.value)
            customers.append([customer_id, owned])
            cust_arche.append(int(a_idx))
            cust_bank.append(b_idx)

    owner = np.array(checking_owner, dtype=np.int64)
    scale = np.array(checking_scale)
    cust_arche = np.array(cust_arche, dtype=np.int64)
    cust_bank = np.array(cust_bank, dtype=np.int64)
    n = len(owner)
    arche_idx = cust_arche[owner]

    cols = {k: np.zeros(n) for k in (
        "pay", "period", "phase", "start_balance", "target", "spend_ratio", "txn_rate", "bill_share",
        "reactivity", "shock_prob", "shock_lo", "shock_hi", "login_response", "floor", "has_floor",
        "cure_prob", "cure_lo", "cure_hi",
    )}
    for a_i, arche in enumerate(archetypes):
        m = np.flatnonzero(arche_idx == a_i)
        k = len(m)
        if k == 0:
            continue
        cols["pay"][m] = np.round(_uniform(rng, arche.paycheck_amount, k))
        cols["period"][m] = rng.choice(np.array(arche.paycheck_periods), size=k)
        cols["start_balance"][m] = np.round(_uniform(rng, arche.start_balance, k))
        cols["target"][m] = _uniform(rng, arche.buffer_target, k)
        cols["spend_ratio"][m] = _uniform(rng, arche.spend_ratio, k)
        cols["txn_rate"][m] = _uniform(rng, arche.txn_rate, k)
        cols["bill_share"][m] = _uniform(rng, arche.bill_share, k)
        cols["reactivity"][m] = _uniform(rng, arche.reactivity, k)
        cols["shock_prob"][m] = _uniform(rng, arche.shock_prob, k)
        cols["shock_lo"][m] = arche.shock_size[0]
        cols["shock_hi"][m] = arche.shock_size[1]
        cols["login_response"][m] = arche.login_response
        cols["cure_prob"][m] = arche.cure_prob
        cols["cure_lo"][m] = arche.cure_cushion[0]
        cols["cure_hi"][m] = arche.cure_cushion[1]
        if arche.hard_floor is not None:
            cols["has_floor"][m] = 1
            cols["floor"][m] = arche.hard_floor
    period = cols["period"].astype(np.int64)
    pay = np.maximum(1, np.round(cols["pay"] * scale)).astype(np.int64)
    monthly = pay * 30.0 / period
    params = _Accounts(
        account_ids=checking_ids,
        customer_idx=owner,
        bank_idx=cust_bank[owner],
        arche_idx=arche_idx,
        pay=pay,
        period=period,
        phase=rng.integers(0, period),
        monthly=monthly,
        start_balance=np.round(cols["start_balance"] * scale).astype(np.int64),
        target=cols["target"] * monthly,
        spend_ratio=cols["spend_ratio"],
        txn_rate=cols["txn_rate"],
        bill_amount=np.maximum(100, np.round(cols["bill_share"] * monthly)).astype(np.int64),
        bill_day=rng.integers(1, 29, size=n),
        reactivity=cols["reactivity"],
        shock_prob=cols["shock_prob"],
        shock_lo=cols["shock_lo"],
        shock_hi=cols["shock_hi"],
        login_response=cols["login_response"],
        cure_prob=cols["cure_prob"],
        cure_lo=cols["cure_lo"],
        cure_hi=cols["cure_hi"],
        floor=cols["floor"].astype(np.int64),
        has_floor=cols["has_floor"].astype(bool),
    )
    # disposable income per day outside the monthly bill
    params.disc_daily = np.maximum(0.0, params.spend_ratio * monthly - params.bill_amount) / 30.0
    login_rates = np.array([_uniform(rng, archetypes[a].login_rate, 1)[0] for a in cust_arche])
    return customers, accounts, params, cust_arche, login_rates


def generate_population(config: SimConfig) -> DatasetBundle:
    """Draw a population and its raw ledger (fees not yet assessed).

    Deterministic for a fixed ``config.seed``. Each checking account's
    opening balance is recorded as a snapshot at ``config.start`` 00:00 UTC.
    Observed timestamps equal true timestamps until
    :func:`apply_observation_lag` runs.
    """
    rng = np.random.default_rng([config.seed, 1])
    customers, accounts, p, cust_arche, login_rates = _draw_population(config, rng)
    n_acct = len(p.account_ids)
    n_cust = len(customers)
    policies = config.policies
    thr = np.array([policies[b].overdraft_threshold for b in p.bank_idx], dtype=np.int64)
    fee = np.array([policies[b].fee_amount for b in p.bank_idx], dtype=np.int64)
    cap = np.array([policies[b].max_fees_per_day for b in p.bank_idx], dtype=np.int64)
    acct_of_customer_first = np.full(n_cust, -1, dtype=np.int64)
    for i in range(n_acct - 1, -1, -1):
        acct_of_customer_first[p.customer_idx[i]] = i

    balance = p.start_balance.copy()
    chunks = []
    login_chunks = []
    sigma = SPEND_SIGMA
    for d in range(config.n_days):
        day = config.start + timedelta(days=d)
        t0 = day_start(day)

        # logins first: a customer who looks at a low balance spends less today
        n_logins = rng.poisson(login_rates)
        logged_in = n_logins > 0
        lc = np.repeat(np.arange(n_cust), n_logins)
        if len(lc):
            login_chunks.append((lc, t0 + rng.integers(0, SECONDS_PER_DAY, size=len(lc))))
        looked = logged_in[p.customer_idx]

        rows_acct, rows_amt, rows_credit, rows_ts, rows_cat = [], [], [], [], []

        def emit(acct_idx, amounts, credit, ts, cat):
            rows_acct.append(acct_idx)
            rows_amt.append(amounts.astype(np.int64))
            rows_credit.append(np.full(len(acct_idx), credit))
            rows_ts.append(ts.astype(np.int64))
            rows_cat.append(np.full(len(acct_idx), _CAT[cat], dtype=np.int8))

        paid = np.flatnonzero((d + p.phase) % p.period == 0)
        pay_amt = np.round(p.pay[paid] * rng.uniform(0.97, 1.03, len(paid)))
        emit(paid, pay_amt, True, t0 + 6 * SECONDS_PER_HOUR + rng.integers(0, 7200, len(paid)), "paycheck")

        billed = np.flatnonzero(p.bill_day == day.day)
        emit(billed, p.bill_amount[billed], False, t0 + 8 * SECONDS_PER_HOUR + rng.integers(0, 7200, len(billed)), "bill_pay")

        # an overdrawn customer may pull money in from elsewhere first thing in the morning
        cured = np.flatnonzero((balance < 0) & (rng.random(n_acct) < p.cure_prob))
        cushion = rng.uniform(p.cure_lo[cured], p.cure_hi[cured]) * p.monthly[cured]
        emit(cured, np.round(-balance[cured] + cushion), True, t0 + 7 * SECONDS_PER_HOUR + rng.integers(0, 3600, len(cured)), "transfer")

        shocked = np.flatnonzero(rng.random(n_acct) < p.shock_prob)
        shock_amt = np.round(rng.uniform(p.shock_lo[shocked], p.shock_hi[shocked]) * p.monthly[shocked])
        emit(shocked, np.maximum(100, shock_amt), False, t0 + rng.integers(9 * 3600, 20 * 3600, len(shocked)), "other")

        gap = (balance - p.target) / p.monthly
        mood = np.clip(np.exp(p.reactivity * gap), 0.2, 2.5)
        mood = np.where(looked & (balance < p.target), mood * (1.0 - p.login_response), mood)
        lam = p.txn_rate * mood
        n_spend = rng.poisson(lam)
        sp = np.repeat(np.arange(n_acct), n_spend)
        mean_amt = p.disc_daily[sp] / p.txn_rate[sp]
        amt = np.exp(rng.normal(np.log(np.maximum(mean_amt, 1.0)) - sigma**2 / 2, sigma))
        cat_idx = rng.choice(len(_SPEND_CATEGORIES), size=len(sp), p=_SPEND_WEIGHTS)
        amt = np.where(cat_idx == _ATM, np.maximum(2000, np.round(amt / 2000) * 2000), np.round(amt))
        amt = np.maximum(50, amt)
        sp_ts = t0 + rng.integers(7 * 3600, 22 * 3600, len(sp))
        for ci, cat in enumerate(_SPEND_CATEGORIES):
            m = cat_idx == ci
            emit(sp[m], amt[m], False, sp_ts[m], cat)

        acct = np.concatenate(rows_acct)
        amount = np.concatenate(rows_amt)
        credit = np.concatenate(rows_credit)
        ts = np.concatenate(rows_ts)
        cat = np.concatenate(rows_cat)

        # floor customers drop discretionary spending and shocks they cannot cover,
        # and pull money from savings to cover bills
        if p.has_floor.any():
            credits_in = np.bincount(acct, weights=np.where(credit, amount, 0), minlength=n_acct)
            debits_out = np.bincount(acct, weights=np.where(credit, 0, amount), minlength=n_acct)
            avail = balance + (credits_in if config.credits_first else 0) - p.floor
            short = p.has_floor & (debits_out > avail)
            drop = short[acct] & ~credit & (cat != _CAT["bill_pay"])
            if drop.any():
                keep = ~drop
                acct, amount, credit, ts, cat = acct[keep], amount[keep], credit[keep], ts[keep], cat[keep]
                debits_out = np.bincount(acct, weights=np.where(credit, 0, amount), minlength=n_acct)
            need = np.flatnonzero(p.has_floor & (debits_out > avail))
            if len(need):
                top_up = (debits_out[need] - avail[need]).astype(np.int64)
                acct = np.concatenate([acct, need])
                amount = np.concatenate([amount, top_up])
                credit = np.concatenate([credit, np.ones(len(need), dtype=bool)])
                ts = np.concatenate([ts, np.full(len(need), t0 + 5 * SECONDS_PER_HOUR)])
                cat = np.concatenate([cat, np.full(len(need), _CAT["transfer"], dtype=np.int8)])

        order = np.lexsort((ts, acct))
        acct, amount, credit, ts, cat = acct[order], amount[order], credit[order], ts[order], cat[order]
        local_id = np.arange(len(acct), dtype=np.int64)
        post = _posting_sort(acct, credit, amount, local_id, config.credits_first)
        res = _post_rows(acct[post], amount[post], credit[post], balance, thr, fee, cap, n_acct)
        balance = balance + res.net
        chunks.append((acct, amount, credit, ts, cat))

    acct = np.concatenate([c[0] for c in chunks])
    amount = np.concatenate([c[1] for c in chunks])
    credit = np.concatenate([c[2] for c in chunks])
    ts = np.concatenate([c[3] for c in chunks])
    cat = np.concatenate([c[4] for c in chunks])
    txn_id = np.arange(1, len(acct) + 1, dtype=np.int64)
    desc = _describe(cat, rng)

    frame = pd.DataFrame(
        {
            "txn_id": txn_id,
            "account_id": pd.Categorical.from_codes(acct, categories=p.account_ids),
            "true_timestamp": ts,
            "observed_timestamp": ts,
            "amount": amount,
            "direction": pd.Categorical.from_codes(
                np.where(credit, 0, 1), categories=[Direction.CREDIT.value, Direction.DEBIT.value]
            ),
            "description": desc,
            "category": pd.Categorical.from_codes(cat, categories=list(_GEN_CATEGORIES)),
        }
    )
    del acct, amount, credit, ts, cat, desc, chunks
    frame = sort_transactions(frame)
    opening = pd.DataFrame(
        {
            "account_id": np.array(p.account_ids, dtype=str),
            "true_timestamp": np.full(n_acct, day_start(config.start), dtype=np.int64),
            "observed_timestamp": np.full(n_acct, day_start(config.start), dtype=np.int64),
            "balance": p.start_balance.astype(np.int64),
        }
    )

    if login_chunks:
        lc = np.concatenate([c[0] for c in login_chunks])
        lt = np.concatenate([c[1] for c in login_chunks])
        order = np.lexsort((lt, lc))
        lc, lt = lc[order], lt[order]
        bounds = np.searchsorted(lc, np.arange(n_cust + 1))
    else:
        lt = np.zeros(0, dtype=np.int64)
        bounds = np.zeros(n_cust + 1, dtype=np.int64)
    cust_objs = tuple(
        Customer(cid, tuple(owned), tuple(int(x) for x in lt[bounds[i] : bounds[i + 1]]))
        for i, (cid, owned) in enumerate(customers)
    )
    return DatasetBundle(
        customers=cust_objs,
        accounts=tuple(accounts),
        transactions=frame,
        balances=sort_balances(opening),
        policies=config.policies,
        seed=config.seed,
        start=config.start,
        end=config.end,
    )


def _describe(cat_codes: np.ndarray, rng: np.random.Generator) -> pd.Categorical:
    labels, offsets = [], []
    for cat in _GEN_CATEGORIES:
        offsets.append(len(labels))
        labels.extend(_DESCRIPTIONS[cat])
    sizes = np.array([len(_DESCRIPTIONS[c]) for c in _GEN_CATEGORIES])
    pick = rng.integers(0, 3, size=len(cat_codes))
    codes = np.asarray(offsets)[cat_codes] + pick % sizes[cat_codes]
    # a few descriptions repeat across categories; merge to unique labels
    uniq = sorted(set(labels))
    remap = np.array([uniq.index(x) for x in labels])
    return pd.Categorical.from_codes(remap[codes], categories=uniq)


# -- fee assessment ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimulationResult:
    bundle: DatasetBundle
    ledger_truth: pd.DataFrame


LEDGER_TRUTH_COLUMNS = (
    "account_id", "posting_date", "seq", "txn_id", "amount", "direction", "category", "balance_after",
)


def assess_fees(
    bundle: DatasetBundle,
    *,
    credits_first: bool = True,
    snapshot_every_days: int = 1,
) -> SimulationResult:
    """Post every checking account-day nightly and insert fee transactions.

    Opening balances come from each account's earliest snapshot. Returns the
    bundle with fees added and end-of-day snapshots (every
    ``snapshot_every_days`` days, at 23:59:59 UTC), plus the posted true
    ledger with the running balance after every line.
    """
    accounts = bundle.account_map
    tx = bundle.transactions
    fee_rows = (tx["category"] == "fee").to_numpy()
    if fee_rows.any():
        raise ValueError("assess_fees expects a raw ledger without fee transactions")

    acct_ids = sorted(a.account_id for a in bundle.accounts if a.kind == AccountKind.CHECKING.value)
    acct_pos = {a: i for i, a in enumerate(acct_ids)}
    n_acct = len(acct_ids)
    policy_of = {p.bank_id: p for p in bundle.policies}
    thr = np.array([policy_of[accounts[a].bank_id].overdraft_threshold for a in acct_ids], dtype=np.int64)
    fee = np.array([policy_of[accounts[a].bank_id].fee_amount for a in acct_ids], dtype=np.int64)
    cap = np.array([policy_of[accounts[a].bank_id].max_fees_per_day for a in acct_ids], dtype=np.int64)
    fee_desc = np.array([policy_of[accounts[a].bank_id].fee_description for a in acct_ids], dtype=object)

    first = bundle.balances.drop_duplicates("account_id", keep="first").set_index("account_id")["balance"]
    balance = np.array([int(first.get(a, 0)) for a in acct_ids], dtype=np.int64)

    a_col = tx["account_id"].map(acct_pos)
    if a_col.isna().any():
        raise ValueError("transactions on non-checking accounts are not simulated")
    acct = a_col.to_numpy(dtype=np.int64)
    amount = tx["amount"].to_numpy(dtype=np.int64)
    credit = (tx["direction"] == Direction.CREDIT.value).to_numpy()
    tid = tx["txn_id"].to_numpy(dtype=np.int64)
    cat_col = pd.Categorical(tx["category"])
    cat_labels = [str(c) for c in cat_col.categories] + ["fee"]
    category = cat_col.codes.astype(np.int16)
    fee_code = np.int16(len(cat_labels) - 1)
    true_ts = tx["true_timestamp"].to_numpy(dtype=np.int64)
    day = true_ts // SECONDS_PER_DAY
    first_day = day_start(bundle.start) // SECONDS_PER_DAY
    n_days = (bundle.end - bundle.start).days

    group = np.where(credit, 0, 1) if credits_first else np.where(credit, 1, 0)
    order = np.lexsort((tid, np.where(credit, 0, -amount), group, acct, day))
    day_sorted = day[order]
    bounds = np.searchsorted(day_sorted, first_day + np.arange(n_days + 1))

    next_id = int(tid.max()) + 1 if len(tid) else 1
    fee_parts, ledger_parts, snap_parts = [], [], []
    for d in range(n_days):
        rows = order[bounds[d] : bounds[d + 1]]
        ra = acct[rows]
        res = _post_rows(ra, amount[rows], credit[rows], balance, thr, fee, cap, n_acct)
        fired = np.flatnonzero(res.fire)
        t_eod = (first_day + d) * SECONDS_PER_DAY + END_OF_DAY
        ids = np.arange(next_id, next_id + len(fired), dtype=np.int64)
        next_id += len(fired)
        fee_parts.append((ra[fired], ids, t_eod))

        # posted ledger: each row, then its fee (if any) directly after it
        slot = res.pos_in_group + res.fees_before_incl - res.fire
        seq_row = slot
        seq_fee = slot[fired] + 1
        ledger_parts.append(
            [
                np.concatenate([ra, ra[fired]]),
                first_day + d,
                np.concatenate([seq_row, seq_fee]),
                np.concatenate([tid[rows], ids]),
                np.concatenate([amount[rows], fee[ra[fired]]]),
                np.concatenate([credit[rows], np.zeros(len(fired), dtype=bool)]),
                np.concatenate([category[rows], np.full(len(fired), fee_code, dtype=np.int16)]),
                np.concatenate([res.balance_after, res.balance_after[fired] - fee[ra[fired]]]),
            ]
        )
        balance = balance + res.net
        if (d + 1) % snapshot_every_days == 0:
            snap_parts.append((t_eod, balance.copy()))

    fee_acct = np.concatenate([f[0] for f in fee_parts])
    fee_ids = np.concatenate([f[1] for f in fee_parts])
    fee_ts = np.concatenate([np.full(len(f[0]), f[2], dtype=np.int64) for f in fee_parts])
    fees = pd.DataFrame(
        {
            "txn_id": fee_ids,
            "account_id": pd.Categorical.from_codes(fee_acct, categories=acct_ids),
            "true_timestamp": fee_ts,
            "observed_timestamp": fee_ts,
            "amount": fee[fee_acct],
            "direction": pd.Categorical(np.full(len(fee_ids), Direction.DEBIT.value)),
            "description": pd.Categorical(fee_desc[fee_acct].astype(str)),
            "category": pd.Categorical(np.full(len(fee_ids), "fee")),
        }
    )
    all_tx = sort_transactions(concat_frames([tx, fees]))

    snaps = [bundle.balances]
    for t_eod, bal in snap_parts:
        snaps.append(
            pd.DataFrame(
                {
                    "account_id": pd.Categorical.from_codes(np.arange(n_acct), categories=acct_ids),
                    "true_timestamp": np.full(n_acct, t_eod, dtype=np.int64),
                    "observed_timestamp": np.full(n_acct, t_eod, dtype=np.int64),
                    "balance": bal,
                }
            )
        )
    balances = sort_balances(concat_frames(snaps))

    # build the posted ledger column by column, already in (account, day, seq) order
    la = np.concatenate([p[0] for p in ledger_parts])
    ld = np.concatenate([np.full(len(p[0]), p[1], dtype=np.int64) for p in ledger_parts])
    seq = np.concatenate([p[2] for p in ledger_parts])
    order = np.lexsort((seq, ld, la))
    seq = seq[order]

    def column(i):
        col = np.concatenate([p[i] for p in ledger_parts])[order]
        for p in ledger_parts:
            p[i] = None
        return col

    truth = {
        "account_id": pd.Categorical.from_codes(la[order], categories=acct_ids),
        "posting_date": canonical_category(
            pd.Categorical.from_codes(
                (ld - first_day)[order],
                categories=[str(bundle.start + timedelta(days=i)) for i in range(n_days)],
            )
        ),
        "seq": seq,
    }
    del la, ld
    truth["txn_id"] = column(3)
    truth["amount"] = column(4)
    truth["direction"] = pd.Categorical.from_codes(np.where(column(5), 0, 1).astype(np.int8), categories=["credit", "debit"])
    truth["category"] = canonical_category(pd.Categorical.from_codes(column(6), categories=cat_labels))
    truth["balance_after"] = column(7)
    ledger_parts.clear()
    truth = pd.DataFrame(truth, copy=False)
    return SimulationResult(bundle.replace(transactions=all_tx, balances=balances), truth)


# -- observation lag --------------------------------------------------------


def _blackout_push(ts: np.ndarray) -> np.ndarray:
    """Move times inside the Friday-evening-to-Monday-morning window to Monday 06:00."""
    monday0 = (np.floor_divide(ts, SECONDS_PER_DAY) - weekday_of(ts)) * SECONDS_PER_DAY
    into_week = ts - monday0
    pushed = monday0 + BLACKOUT_END
    # window opens Friday 18:00 and runs past Sunday midnight into the next week's Monday
    late = into_week >= BLACKOUT_START
    early = into_week < BLACKOUT_END - SECONDS_PER_WEEK
    out = np.where(late, pushed, ts)
    out = np.where(early, monday0 + BLACKOUT_END - SECONDS_PER_WEEK, out)
    return out


def _lag_seconds(n, policy: BankPolicy, rng: np.random.Generator) -> np.ndarray:
    lo, hi = policy.txn_lag.min_hours, policy.txn_lag.max_hours
    return rng.integers(lo, hi + 1, size=n).astype(np.int64) * SECONDS_PER_HOUR


def apply_observation_lag(bundle: DatasetBundle, policies: Sequence[BankPolicy] | None = None, seed: int | None = None) -> DatasetBundle:
    """Fill observed timestamps from each bank's lag policy.

    ``observed = true + lag`` with lag drawn uniformly in whole hours; balance
    snapshots add ``balance_lag_extra`` hours. Under ``weekend_blackout`` an
    observation landing between Friday 18:00 and Monday 06:00 UTC is held
    until Monday 06:00. The opening snapshot at the start of the range is
    treated as already known (no lag). Draws are seeded from ``seed``
    (default: the bundle seed).
    """
    policies = tuple(policies) if policies is not None else bundle.policies
    policy_of = {p.bank_id: p for p in policies}
    bank_of = {a.account_id: a.bank_id for a in bundle.accounts}
    seed = bundle.seed if seed is None else seed

    def lagged(frame: pd.DataFrame, stream: int, extra: bool) -> pd.DataFrame:
        frame = frame.copy()
        true_ts = frame["true_timestamp"].to_numpy(dtype=np.int64)
        obs = true_ts.copy()
        banks = frame["account_id"].map(bank_of).to_numpy()
        for b_idx, bank_id in enumerate(sorted(policy_of)):
            m = np.flatnonzero(banks == bank_id)
            if len(m) == 0:
                continue
            pol = policy_of[bank_id]
            rng = np.random.default_rng([seed, stream, b_idx])
            lag = _lag_seconds(len(m), pol, rng)
            if extra:
                lag = lag + pol.balance_lag_extra * SECONDS_PER_HOUR
            o = true_ts[m] + lag
            if pol.weekend_blackout:
                o = _blackout_push(o)
            obs[m] = o
        frame["observed_timestamp"] = np.maximum(obs, true_ts)
        return frame

    tx = lagged(bundle.transactions, 11, extra=False)
    bal = lagged(bundle.balances, 12, extra=True)
    opening = bal["true_timestamp"].to_numpy() == day_start(bundle.start)
    bal.loc[opening, "observed_timestamp"] = bal.loc[opening, "true_timestamp"]
    return bundle.replace(transactions=tx, balances=bal)


def simulate(config: SimConfig) -> SimulationResult:
    """Full bank-side simulation: population, nightly fees, observation lag."""
    raw = generate_population(config)
    result = assess_fees(raw, credits_first=config.credits_first, snapshot_every_days=config.snapshot_every_days)
    observed = apply_observation_lag(result.bundle, config.policies, config.seed)
    return SimulationResult(observed, result.ledger_truth)


def replay_ledger(ledger_truth: pd.DataFrame, opening: dict[str, int]) -> dict[str, int]:
    """Closing balance per account from replaying the posted ledger in order."""
    signed = np.where(ledger_truth["direction"].to_numpy() == "credit", 1, -1) * ledger_truth["amount"].to_numpy()
    totals = pd.Series(signed).groupby(ledger_truth["account_id"].to_numpy()).sum()
    return {a: int(opening.get(a, 0) + totals.get(a, 0)) for a in sorted(set(opening) | set(totals.index))}


def save_ledger_truth(ledger_truth: pd.DataFrame, path) -> None:
    """Posted ledger as JSON Lines, one posting per line in posting order."""
    text = ledger_truth.to_json(orient="records", lines=True)
    if text and not text.endswith("\n"):
        text += "\n"
    Path(path).write_text(text, encoding="utf-8")

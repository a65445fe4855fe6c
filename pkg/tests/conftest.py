from datetime import date, datetime, timezone

import pytest

from overdraft_ews.banksim import DEFAULT_POLICIES, default_sim_config, simulate
from overdraft_ews.domain import (
    Account,
    BalanceSnapshot,
    BankPolicy,
    Customer,
    DatasetBundle,
    Transaction,
    TxnLag,
    balances_frame,
    sort_balances,
    sort_transactions,
    transactions_frame,
)
from overdraft_ews.ledger import LedgerIndex

POLICY = BankPolicy("bank_a", 3_500, 0, 3, "OVERDRAFT ITEM FEE", TxnLag(0, 0))
START = date(2020, 1, 1)
END = date(2020, 12, 31)


def ts(y, m, d, hh=0, mm=0):
    return int(datetime(y, m, d, hh, mm, tzinfo=timezone.utc).timestamp())


def txn(txn_id, account, when, amount, direction="debit", category="groceries", description=None, observed=None):
    if description is None:
        description = POLICY.fee_description if category == "fee" else "COFFEE SHOP #12"
    return Transaction(txn_id, account, when, when if observed is None else observed, amount, direction, description, category)


def make_bundle(txns=(), snaps=(), accounts=None, customers=None, policies=(POLICY,), start=START, end=END, seed=1):
    """Small hand-built bundle; defaults to one customer with one checking account."""
    if accounts is None:
        accounts = (Account("a1", "c1", "bank_a", "checking"),)
    if customers is None:
        owned = {}
        for a in accounts:
            owned.setdefault(a.customer_id, []).append(a.account_id)
        customers = tuple(Customer(c, tuple(ids)) for c, ids in sorted(owned.items()))
    return DatasetBundle(
        customers=tuple(customers),
        accounts=tuple(accounts),
        transactions=sort_transactions(transactions_frame(txns)),
        balances=sort_balances(balances_frame(snaps)),
        policies=tuple(policies),
        seed=seed,
        start=start,
        end=end,
    )


def snap(account, when, balance, observed=None):
    return BalanceSnapshot(account, when, when if observed is None else observed, balance)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(default_sim_config(seed=11, n_customers=300))


@pytest.fixture(scope="session")
def small_index(small_sim):
    return LedgerIndex(small_sim.bundle)


@pytest.fixture
def policies():
    return DEFAULT_POLICIES


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

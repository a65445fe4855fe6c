from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest

from overdraft_ews.banksim import default_sim_config, simulate
from overdraft_ews.domain import Account, Customer, SECONDS_PER_DAY, day_start
from overdraft_ews.features import (
    FEATURE_COLUMNS,
    FeatureSpec,
    build_design_matrix,
    extract_features,
    feature_matrix,
    recompute_balance,
    write_features_csv,
)
from overdraft_ews.labeling import build_cohort, cohort_accounts
from overdraft_ews.ledger import LedgerIndex

from conftest import POLICY, make_bundle, snap, ts, txn

AS_OF = date(2020, 6, 5)
T = day_start(AS_OF)
D = SECONDS_PER_DAY
SPEC = FeatureSpec()


def fee(i, when, account="a1", observed=None):
    return txn(i, account, when, POLICY.fee_amount, category="fee", observed=observed)


def test_recompute_balance_examples():
    b = make_bundle([txn(1, "a1", T - 2 * D, 3_000)], [snap("a1", T - 3 * D, 10_000)])
    assert recompute_balance("a1", AS_OF, b) == 7_000
    late = make_bundle([txn(1, "a1", T - 2 * D, 3_000, observed=T + 3600)], [snap("a1", T - 3 * D, 10_000)])
    assert recompute_balance("a1", AS_OF, late) == 10_000
    with_fee = make_bundle(
        [txn(1, "a1", T - 2 * D, 3_000), fee(2, T - 2 * D + 100)], [snap("a1", T - 3 * D, 1_000)]
    )
    assert recompute_balance("a1", AS_OF, with_fee) == -5_500
    assert recompute_balance("a1", AS_OF, make_bundle([])) is None


def test_snapshot_observed_after_as_of_is_ignored():
    b = make_bundle(
        [txn(1, "a1", T - D, 500)],
        [snap("a1", T - 5 * D, 2_000), snap("a1", T - D // 2, 9_999, observed=T + 60)],
    )
    assert recompute_balance("a1", AS_OF, b) == 1_500
    row = extract_features("c1", "a1", AS_OF, SPEC, b)
    assert row.f_last_known_balance == 2_000
    assert row.f_recomputed_balance == 1_500


def test_od_history_counts():
    b = make_bundle([fee(1, T - 10 * D), fee(2, T - 100 * D)])
    row = extract_features("c1", "a1", AS_OF, SPEC, b)
    assert row.f_od_count_6m == 2
    assert row.f_days_since_last_od == 10
    assert row.f_od_last_week == 0
    assert row.f_last_od_amount == POLICY.fee_amount


def test_empty_windows_impute_zero():
    b = make_bundle([fee(1, T - 50 * D)])
    row = extract_features("c1", "a1", AS_OF, SPEC, b)
    for side in ("debit", "credit"):
        for tag in ("4w", "1w"):
            for stat in ("count", "min", "max", "avg"):
                assert getattr(row, f"f_{side}_{stat}_{tag}") == 0
    assert row.f_debit_sum_1w == 0
    assert row.f_days_since_last_login == SPEC.days_cap
    assert row.f_last_known_balance == 0 and row.f_recomputed_balance == 0


def test_product_counts():
    accounts = (
        Account("a1", "c1", "bank_a", "checking"),
        Account("a2", "c1", "bank_a", "savings"),
        Account("a3", "c1", "bank_a", "credit_card"),
        Account("a4", "c1", "bank_a", "credit_card"),
    )
    row = extract_features("c1", "a1", AS_OF, SPEC, make_bundle([], accounts=accounts))
    assert (row.f_n_checking, row.f_n_savings, row.f_n_credit_card, row.f_n_cd, row.f_n_investment) == (1, 1, 2, 0, 0)


def test_window_stats_and_thresholds():
    t = [
        txn(1, "a1", T - 2 * D, 1_000),
        txn(2, "a1", T - 3 * D, 7_001),
        txn(3, "a1", T - 20 * D, 4_999),
        txn(4, "a1", T - 40 * D, 100),
        txn(5, "a1", T - 5 * D, 20_001, "credit", "paycheck", "PAY"),
        txn(6, "a1", T - 25 * D, 20_000, "credit", "paycheck", "PAY"),
        fee(7, T - 2 * D),
    ]
    row = extract_features("c1", "a1", AS_OF, SPEC, make_bundle(t))
    assert (row.f_debit_count_1w, row.f_debit_min_1w, row.f_debit_max_1w) == (2, 1_000, 7_001)
    assert row.f_debit_avg_1w == (1_000 + 7_001) // 2
    assert row.f_debit_sum_1w == 8_001
    assert row.f_debit_count_4w == 3
    assert row.f_debit_under50_count_2m == 3
    assert row.f_credit_over200_count_2m == 1
    assert row.f_credit_count_4w == 2 and row.f_credit_count_1w == 1
    assert row.f_od_last_week == 1 and row.f_days_since_last_od <= 7


def test_window_edges_use_true_time_and_observation():
    t = [
        txn(1, "a1", T - 7 * D, 300),  # exactly on the 7-day edge: counted
        txn(2, "a1", T - 7 * D - 1, 400),  # one second before: 4w only
        txn(3, "a1", T, 500),  # the as-of instant itself
        txn(4, "a1", T - D, 600, observed=T + 1),  # not yet observed
    ]
    row = extract_features("c1", "a1", AS_OF, SPEC, make_bundle(t))
    assert row.f_debit_count_1w == 2
    assert row.f_debit_sum_1w == 800
    assert row.f_debit_count_4w == 3


def test_logins():
    logins = (T - 40 * D, T - 10 * D, T - 3 * D, T - 2 * D, T + 100)
    b = make_bundle([], customers=(Customer("c1", ("a1",), logins),))
    row = extract_features("c1", "a1", AS_OF, SPEC, b)
    assert (row.f_login_count_1w, row.f_login_count_4w, row.f_days_since_last_login) == (2, 3, 2)


def test_all_account_od_count():
    accounts = (Account("a1", "c1", "bank_a", "checking"), Account("a2", "c1", "bank_a", "checking"))
    b = make_bundle([fee(1, T - 3 * D, "a1"), fee(2, T - 4 * D, "a2"), fee(3, T - 5 * D, "a2")], accounts=accounts)
    row = extract_features("c1", "a1", AS_OF, SPEC, b)
    assert row.f_od_count_6m == 1
    assert row.f_od_count_6m_all == 3


def test_design_matrix_alignment_and_determinism(small_index):
    cohort = build_cohort(small_index, AS_OF)[:3]
    dm = build_design_matrix(cohort, AS_OF, SPEC, small_index)
    assert dm.X.shape == (3, len(FEATURE_COLUMNS))
    assert [(u.customer_id, u.account_id) for u in dm.units] == cohort
    again = build_design_matrix(cohort, AS_OF, SPEC, small_index)
    assert np.array_equal(dm.X, again.X)
    for i, (cid, aid) in enumerate(cohort):
        assert dm.row(i) == extract_features(cid, aid, AS_OF, SPEC, small_index)
    shuffled = replace(SPEC, windows=(183, 7, 61, 28))
    assert np.array_equal(build_design_matrix(cohort, AS_OF, shuffled, small_index).X, dm.X)
    with pytest.raises(ValueError):
        build_design_matrix([], AS_OF, SPEC, small_index)


def test_row_invariants_on_simulated_data(small_index):
    acc = cohort_accounts(small_index, AS_OF)
    X = feature_matrix(small_index, acc, AS_OF)
    col = {c: X[:, j] for j, c in enumerate(FEATURE_COLUMNS)}
    counts = [c for c in FEATURE_COLUMNS if "count" in c or c.startswith("f_n_")]
    assert all((col[c] >= 0).all() for c in counts)
    for side in ("debit", "credit"):
        for tag in ("4w", "1w"):
            has = col[f"f_{side}_count_{tag}"] > 0
            mn, avg, mx = col[f"f_{side}_min_{tag}"], col[f"f_{side}_avg_{tag}"], col[f"f_{side}_max_{tag}"]
            assert ((mn <= avg) & (avg <= mx))[has].all()
    assert (col["f_days_since_last_od"][col["f_od_last_week"] == 1] <= 7).all()
    assert (col["f_od_count_6m"] >= 1).all()  # every cohort unit has a fee in the window
    assert (col["f_od_count_6m_all"] >= col["f_od_count_6m"]).all()


def test_debit_sum_matches_counted_debits(small_index):
    acc = cohort_accounts(small_index, AS_OF)[:25]
    X = feature_matrix(small_index, acc, AS_OF)
    j_sum = FEATURE_COLUMNS.index("f_debit_sum_1w")
    j_cnt = FEATURE_COLUMNS.index("f_debit_count_1w")
    tx = small_index.bundle.transactions
    for i, a in enumerate(acc):
        aid = small_index.account_ids[a]
        m = (
            (tx["account_id"] == aid)
            & (tx["direction"] == "debit")
            & (tx["category"] != "fee")
            & (tx["true_timestamp"] >= T - 7 * D)
            & (tx["true_timestamp"] <= T)
            & (tx["observed_timestamp"] <= T)
        )
        assert X[i, j_cnt] == m.sum()
        assert X[i, j_sum] == tx.loc[m, "amount"].sum()


def test_translation_by_whole_weeks(small_sim):
    weeks = 3
    shift = weeks * 7 * D
    b = small_sim.bundle
    tx = b.transactions.copy()
    bal = b.balances.copy()
    for f in (tx, bal):
        f["true_timestamp"] += shift
        f["observed_timestamp"] += shift
    customers = tuple(replace(c, login_timestamps=tuple(t + shift for t in c.login_timestamps)) for c in b.customers)
    moved = b.replace(
        transactions=tx, balances=bal, customers=customers,
        start=b.start + timedelta(weeks=weeks), end=b.end + timedelta(weeks=weeks),
    )
    idx0, idx1 = LedgerIndex(b), LedgerIndex(moved)
    acc = cohort_accounts(idx0, AS_OF)
    X0 = feature_matrix(idx0, acc, AS_OF)
    X1 = feature_matrix(idx1, acc, AS_OF + timedelta(weeks=weeks))
    assert np.array_equal(X0, X1)


@pytest.fixture(scope="module")
def leak_bundle():
    return simulate(default_sim_config(seed=17, n_customers=90)).bundle


def test_leakage_perturbations(leak_bundle):
    """1,000 random edits to events observed after as_of never move a feature."""
    rng = np.random.default_rng(20200605)
    b = leak_bundle
    idx = LedgerIndex(b)
    tx = b.transactions
    dates = [date(2020, 4, 3) + timedelta(weeks=i) for i in range(10)]
    base = {}
    for d in dates:
        acc = cohort_accounts(idx, d)
        base[d] = (acc, feature_matrix(idx, acc, d))
    obs = tx["observed_timestamp"].to_numpy()
    n_checked = 0
    while n_checked < 1_000:
        d = dates[rng.integers(len(dates))]
        acc, X0 = base[d]
        T_d = day_start(d)
        a = acc[rng.integers(len(acc))]
        aid = idx.account_ids[a]
        rows = np.flatnonzero((tx["account_id"].to_numpy() == aid) & (obs > T_d))
        if len(rows) == 0:
            continue
        pick = rows[rng.integers(len(rows), size=min(len(rows), 5))]
        mut = tx.copy()
        kind = rng.integers(3)
        if kind == 0:
            mut = mut.drop(mut.index[pick])
        elif kind == 1:
            mut.loc[mut.index[pick], "amount"] = mut.loc[mut.index[pick], "amount"] * 7 + 1
        else:
            # move the true time before as_of but keep the late observation
            new_true = T_d - rng.integers(1, 30 * D, size=len(pick))
            mut.loc[mut.index[pick], "true_timestamp"] = new_true
            mut = mut.sort_values(["account_id", "true_timestamp", "txn_id"], kind="stable")
        idx_m = LedgerIndex(b.replace(transactions=mut.reset_index(drop=True)))
        X1 = feature_matrix(idx_m, acc, d)
        assert np.array_equal(X0, X1), (d, aid, kind)
        n_checked += 1


def test_features_csv_header_is_canonical(tmp_path, small_index):
    cohort = build_cohort(small_index, AS_OF)[:4]
    dm = build_design_matrix(cohort, AS_OF, SPEC, small_index)
    write_features_csv(dm, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].split(",") == ["customer_id", "account_id", "as_of_date", *FEATURE_COLUMNS]
    assert len(lines) == 5

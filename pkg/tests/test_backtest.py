import random
import warnings
from datetime import date, timedelta

import numpy as np
import pytest

from overdraft_ews import backtest as bt
from overdraft_ews.backtest import (
    BelowTargetWarning,
    ModelCard,
    SelectionWarning,
    SplitPlanError,
    WeeklyDesign,
    audit_leakage,
    choose_k,
    finalize,
    make_weekly_splits,
    pool_dates,
    run_grid,
    select_model,
    select_with_trail,
)
from overdraft_ews.banksim import default_sim_config, simulate
from overdraft_ews.learners import Hyperparams
from overdraft_ews.ledger import LedgerIndex

SIM = default_sim_config()

WEEKS = [date(2020, 6, 5) + timedelta(weeks=i) for i in range(4)]


def card(hp, precisions, k=10.0, recalls=None, weeks=WEEKS):
    hist = {}
    for j, (w, p) in enumerate(zip(weeks, precisions)):
        r = None if recalls is None else recalls[j]
        hist[w] = {k: {"precision": p, "recall": r, "auc": None, "prior": 0.1}}
    return ModelCard("bank_a", hp, hist)


def multi_k_card(curve, recall=None):
    """curve: {k: precision}, same in every week."""
    hist = {w: {float(k): {"precision": p, "recall": (recall or {}).get(k, 0.0), "auc": None, "prior": 0.1}
                for k, p in curve.items()} for w in WEEKS}
    return ModelCard("bank_a", Hyperparams.make("gbdt"), hist)


GB_SMALL = Hyperparams.make("gbdt", n_estimators=100, learning_rate=0.1, subsample=0.5, max_depth=5)
GB_BIG = Hyperparams.make("gbdt", n_estimators=10_000, learning_rate=0.1, subsample=0.5, max_depth=5)
LR = Hyperparams.make("logreg", penalty="l2", C=0.1)


# -- split plan ------------------------------------------------------------


def oracle_fridays(start, end):
    out = []
    d = start
    while d <= end:
        if d.weekday() == 4 and d - timedelta(days=183) >= start and d + timedelta(days=14) <= end:
            out.append(d)
        d += timedelta(days=1)
    return out


def test_split_windows_match_the_worked_dates():
    # a Sunday cadence, so that the first pair trains as of 2020-06-07
    start = date(2020, 6, 7) - timedelta(days=183)
    plan = make_weekly_splits(start, date(2020, 7, 31), weekday=6)
    s = plan.splits[0]
    assert s.train_as_of == date(2020, 6, 7)
    assert s.train_label_end == date(2020, 6, 14)
    assert s.test_as_of == date(2020, 6, 14)
    assert s.test_label_end == date(2020, 6, 21)


@pytest.mark.parametrize("start,end", [
    (date(2020, 1, 1), date(2020, 12, 31)),
    (date(2019, 11, 3), date(2020, 9, 1)),
    (date(2020, 1, 1), date(2020, 7, 17)),
])
def test_split_count_matches_friday_oracle(start, end):
    plan = make_weekly_splits(start, end)
    assert [s.train_as_of for s in plan] == oracle_fridays(start, end)
    assert all(s.train_as_of.weekday() == 4 for s in plan)


def test_default_sim_range_gives_27_pairs():
    plan = make_weekly_splits(SIM.start, SIM.end)
    assert len(plan) == 27
    assert plan.splits[0].train_as_of == date(2020, 3, 13)


def test_shift_start_by_a_week_drops_first_pair():
    a = make_weekly_splits(date(2020, 1, 1), date(2020, 12, 31))
    b = make_weekly_splits(date(2020, 1, 8), date(2020, 12, 31))
    assert b.splits == a.splits[1:]


def test_split_errors():
    with pytest.raises(SplitPlanError):
        make_weekly_splits(date(2020, 1, 1), date(2020, 3, 1))
    with pytest.raises(SplitPlanError):
        make_weekly_splits(date(2020, 1, 1), date(2020, 5, 1))  # long enough, but no room for look-back
    with pytest.raises(SplitPlanError):
        bt.SplitPlan((bt.Split(date(2020, 7, 3), date(2020, 7, 9)),))


def test_plan_round_trip_and_pool_dates():
    plan = make_weekly_splits(date(2020, 1, 1), date(2020, 12, 31))
    assert bt.SplitPlan.from_dict(plan.to_dict()) == plan
    assert pool_dates(plan, 0) == [plan.splits[0].train_as_of]
    p = pool_dates(plan, 10)
    assert len(p) == 8 and p[-1] == plan.splits[10].train_as_of
    assert all(b - a == timedelta(days=7) for a, b in zip(p, p[1:]))


# -- grid ------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid_index():
    # big enough for every bank to have positives in each test week
    return LedgerIndex(simulate(default_sim_config(seed=23, n_customers=1500)).bundle)


@pytest.fixture(scope="module")
def design(grid_index):
    return WeeklyDesign(grid_index)


@pytest.fixture(scope="module")
def plan3():
    full = make_weekly_splits(SIM.start, SIM.end)
    return bt.SplitPlan(full.splits[10:13])


def test_grid_bookkeeping(design, plan3):
    cards = run_grid("bank_a", plan3, [Hyperparams.make("dtree", max_depth=5)], [5, 10], design)
    assert len(cards) == 1
    c = cards[0]
    assert c.weeks() == plan3.test_dates
    for row in c.history.values():
        assert set(row) == {5.0, 10.0}
        assert 0 <= row[10.0]["precision"] <= 1
    assert c.model is not None


def test_grid_is_deterministic(grid_index, plan3):
    grid = [Hyperparams.make("dtree", max_depth=5), GB_SMALL]
    a = run_grid("bank_b", plan3, grid, [10], WeeklyDesign(grid_index))
    b = run_grid("bank_b", plan3, grid, [10], WeeklyDesign(grid_index))
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]


def test_missing_split_is_marked_not_fabricated(design, plan3):
    cards = run_grid("no_such_bank", plan3, [LR], [10], design)
    assert all(v is None for v in cards[0].history.values())
    assert cards[0].mean_metric("precision", 10) is None


def test_leakage_audit_is_clean(design):
    plan = make_weekly_splits(SIM.start, SIM.end)
    for bank in ("bank_a", "bank_b", "bank_c"):
        assert audit_leakage(plan, design, bank) == []


def test_leakage_audit_flags_overlapping_label_windows(design):
    plan = make_weekly_splits(SIM.start, SIM.end)
    # pooling the test as-of into training would overlap the label windows
    bad = bt.SplitPlan(plan.splits[:3])
    orig = bt.pool_dates
    try:
        bt.pool_dates = lambda p, i, w=8: [s.test_as_of for s in p.splits[: i + 1]]
        problems = audit_leakage(bad, design, "bank_a")
    finally:
        bt.pool_dates = orig
    assert problems and all(p["rule"] == "train label window overlaps test label window" for p in problems)


def test_card_json_round_trip(design, plan3, tmp_path):
    cards = run_grid("bank_a", plan3, [LR, Hyperparams.make("dtree", max_depth=5)], [2, 10], design)
    cards[1].k_percent, cards[1].selected = 10.0, True
    bt.save_cards(cards, tmp_path / "cards.json")
    back = bt.load_cards(tmp_path / "cards.json")
    assert [c.to_dict() for c in back] == [c.to_dict() for c in cards]


# -- selection -------------------------------------------------------------


def test_stability_rule_prefers_steady_card():
    a = card(GB_SMALL, [0.50, 0.10, 0.50, 0.10])
    b = card(LR, [0.42, 0.42, 0.42, 0.42])
    # B also trails A by more than 5% in weeks 1 and 3, so neither card is
    # near-best every week and the rule falls back to the better mean
    with pytest.warns(SelectionWarning):
        sel = select_with_trail([a, b])
    assert sel.card is b and sel.fallback
    trail = {t["key"]: t for t in sel.trail}
    assert trail[GB_SMALL.key()]["eligible_by_week"] == [True, False, True, False]
    assert trail[LR.key()]["eligible_by_week"] == [False, True, False, True]


def test_steady_card_wins_without_fallback():
    steady = card(LR, [0.42] * 4)
    volatile = card(GB_SMALL, [0.44, 0.44, 0.44, 0.39])  # higher mean, one bad week
    sel = select_with_trail([volatile, steady])
    assert sel.card is steady and not sel.fallback
    assert select_model([volatile, steady], tolerance=1.0) is volatile


def test_tolerance_one_is_max_mean():
    rng = np.random.default_rng(4)
    hps = [GB_SMALL, GB_BIG, LR, Hyperparams.make("dtree", max_depth=5)]
    for _ in range(20):
        cards = [card(hp, np.round(rng.uniform(0.1, 0.6, 4), 3)) for hp in hps]
        want = max(cards, key=lambda c: c.mean_metric("precision", 10))
        assert select_model(cards, tolerance=1.0) is want
    a = card(GB_SMALL, [0.50, 0.10, 0.50, 0.10])
    b = card(LR, [0.42] * 4)
    assert select_model([a, b], tolerance=1.0) is b  # mean 0.30 < 0.42


def test_absolute_mode():
    a = card(GB_SMALL, [0.44, 0.44, 0.44, 0.39])
    b = card(LR, [0.42, 0.42, 0.42, 0.42])
    assert select_model([a, b]) is b  # 0.39 < 0.95 * 0.42
    assert select_model([a, b], mode="absolute") is a  # 0.39 >= 0.42 - 0.05


def test_single_card_and_tie_break():
    only = card(LR, [0.3] * 4)
    assert select_model([only]) is only
    big, small = card(GB_BIG, [0.4] * 4), card(GB_SMALL, [0.4] * 4)
    assert select_model([big, small]) is small
    assert select_model([small, big]) is small


def test_selection_invariant_to_order():
    rng = np.random.default_rng(9)
    hps = [Hyperparams.make("gbdt", n_estimators=n, learning_rate=lr, subsample=0.5, max_depth=5)
           for n in (100, 10_000) for lr in (0.01, 0.1, 0.5)]
    cards = [card(hp, np.round(rng.uniform(0.3, 0.5, 4), 2)) for hp in hps]
    want = select_model(cards)
    shuffler = random.Random(3)
    for _ in range(10):
        shuffler.shuffle(cards)
        assert select_model(cards) is want


def test_fallback_warns():
    a = card(GB_SMALL, [0.5, 0.1, 0.5, 0.1])
    b = card(LR, [0.1, 0.5, 0.1, 0.5])
    with pytest.warns(SelectionWarning):
        sel = select_with_trail([a, b])
    assert sel.fallback


def test_selection_needs_enough_weeks():
    with pytest.raises(ValueError):
        select_model([card(LR, [0.4, 0.4])])


# -- choose_k --------------------------------------------------------------


def test_choose_k_largest_with_enough_precision():
    c = multi_k_card({2: 0.55, 6: 0.46, 10: 0.42, 15: 0.33})
    assert choose_k(c) == 10


def test_choose_k_flat_precision_takes_largest():
    assert choose_k(multi_k_card({2: 0.5, 5: 0.5, 10: 0.5, 15: 0.5})) == 15


def test_choose_k_balanced_row_accepted():
    c = multi_k_card({2: 0.6, 10: 0.42, 15: 0.35}, recall={10: 0.49})
    assert choose_k(c) == 10


def test_choose_k_below_target_warns_and_uses_smallest():
    c = multi_k_card({2: 0.3, 10: 0.2})
    with pytest.warns(BelowTargetWarning):
        assert choose_k(c) == 2


def test_finalize_marks_exactly_one():
    cards = [card(LR, [0.42] * 4), card(GB_SMALL, [0.5, 0.1, 0.5, 0.1]), card(GB_BIG, [0.3] * 4)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BelowTargetWarning)
        sel = finalize(cards)
    assert sum(c.selected for c in cards) == 1
    assert sel.card.selected and sel.card.k_percent == 10.0

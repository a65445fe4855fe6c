"""The eight acceptance criteria, one test each. Every test records a
PASS/FAIL line that is printed in the terminal summary (and echoed with -s)."""

import contextlib
import json
import time
import warnings
from datetime import date, timedelta

import numpy as np
import pytest

import conftest
import test_backtest
import test_banksim
import test_features
import test_learners
import test_metrics
from overdraft_ews import backtest as bt
from overdraft_ews import cli
from overdraft_ews.banksim import default_sim_config, simulate
from overdraft_ews.learners import business_rule_hp, gini_importance, production_grid
from overdraft_ews.ledger import LedgerIndex
from overdraft_ews.metrics import lift
from overdraft_ews.rct import DEFAULT_WEIGHTS, BehaviorParams, assign_all, build_report, simulate_intervention, synthetic_alerts


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException:
        line = f"criterion {n} FAIL  {title} ({time.perf_counter() - t0:.1f}s)"
        conftest.ACCEPTANCE[n] = line
        print(line)
        raise
    line = f"criterion {n} PASS  {title} ({time.perf_counter() - t0:.1f}s)" + ("  " + "; ".join(notes) if notes else "")
    conftest.ACCEPTANCE[n] = line
    print(line)


def test_c1_metric_oracles():
    with criterion(1, "metrics equal brute-force oracles; lift arithmetic") as notes:
        t0 = time.perf_counter()
        test_metrics.test_metrics_equal_brute_force_on_500_cohorts()
        assert round(lift(0.42, 0.09), 2) == 4.67
        assert round(lift(0.42, 0.36), 2) == 1.17
        elapsed = time.perf_counter() - t0
        assert elapsed < 10
        notes.append("500 cohorts")


def test_c2_leakage():
    with criterion(2, "post-as-of perturbations and split audit") as notes:
        t0 = time.perf_counter()
        test_features.test_leakage_perturbations(simulate(default_sim_config(seed=17, n_customers=90)).bundle)
        sim = default_sim_config(seed=29, n_customers=600)
        design = bt.WeeklyDesign(LedgerIndex(simulate(sim).bundle))
        plan = bt.make_weekly_splits(sim.start, sim.end)
        for bank in ("bank_a", "bank_b", "bank_c"):
            assert bt.audit_leakage(plan, design, bank) == []
        assert time.perf_counter() - t0 < 60
        notes.append(f"1000 perturbations, {len(plan)} splits x 3 banks audited")


def test_c3_learner_numerics():
    with criterion(3, "gradients, GBDT monotone loss, importances") as notes:
        t0 = time.perf_counter()
        test_learners.test_logreg_gradient_matches_finite_differences()
        for dropout in (False, True):
            test_learners.test_ffnn_gradients_match_finite_differences(dropout)
        test_learners.test_gbdt_loss_never_increases_on_low_lr_grid()
        from overdraft_ews.learners import Hyperparams

        for hp in (
            Hyperparams.make("rforest", n_estimators=100, max_depth=10, max_features="sqrt", min_samples_split=2),
            Hyperparams.make("gbdt", n_estimators=100, learning_rate=0.5, subsample=0.1, max_depth=5),
            Hyperparams.make("dtree", max_depth=20),
        ):
            test_learners.test_importances_nonnegative_and_normalised(hp)
        assert time.perf_counter() - t0 < 120
        notes.append(f"{len(test_learners.LOW_LR_GBDT)} GBDT grid points")


def test_c4_simulator_mechanics(small_sim):
    with criterion(4, "fee cap, posting examples, ledger replay") as notes:
        test_banksim.test_fee_cap_over_many_account_days(small_sim)
        test_banksim.test_posting_example_no_fee()
        test_banksim.test_posting_example_cap_one()
        test_banksim.test_replay_reproduces_closing_balances(small_sim)
        n_days = (small_sim.bundle.end - small_sim.bundle.start).days
        n_chk = sum(a.kind == "checking" for a in small_sim.bundle.accounts)
        notes.append(f"{n_chk * n_days} account-days")


@pytest.mark.slow
def test_c5_planted_signal():
    with criterion(5, "selected GBDT beats prior x3 and rule x1.1; f_od_count_6m top-3") as notes:
        t0 = time.perf_counter()
        cfg = default_sim_config(seed=0)
        design = bt.WeeklyDesign(LedgerIndex(simulate(cfg).bundle))
        plan = bt.make_weekly_splits(cfg.start, cfg.end)
        failures = []
        for bank in ("bank_a", "bank_b", "bank_c"):
            cards = bt.run_grid(bank, plan, production_grid(cfg.seed), [10], design)
            rule = bt.run_grid(bank, plan, [business_rule_hp(cfg.seed)], [10], design)[0]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", bt.SelectionWarning)
                card = bt.select_model(cards)
            # averaged over every evaluated test week
            prior = rule.mean_metric("prior", 10)
            p = card.mean_metric("precision", 10)
            p_rule = rule.mean_metric("precision", 10)
            imp = gini_importance(card.model)
            top3 = sorted(imp, key=lambda f: (-imp[f], f))[:3]
            notes.append(f"{bank} prior {prior:.3f} p@10 {p:.3f} rule {p_rule:.3f} x{p / prior:.2f} x{p / p_rule:.2f}")
            if not (p >= 3 * prior and p >= 1.1 * p_rule and "f_od_count_6m" in top3):
                failures.append((bank, p, prior, p_rule, top3))
            assert 0.03 <= prior <= 0.10, (bank, prior)
        assert not failures, failures
        assert time.perf_counter() - t0 < 15 * 60


def test_c6_stability_selection():
    with criterion(6, "steady card selected; tolerance 1.0 gives max mean") as notes:
        test_backtest.test_stability_rule_prefers_steady_card()
        test_backtest.test_steady_card_wins_without_fallback()
        test_backtest.test_tolerance_one_is_max_mean()
        notes.append("volatile 0.50/0.10 has mean 0.30 < 0.42, so it can only win when its mean is higher")


def test_c7_rct_recovery():
    with criterion(7, "RCT rates recovered, savings positive, clickers significant") as notes:
        t0 = time.perf_counter()
        params = BehaviorParams()
        seed = 2020
        weeks = [date(2020, 6, 5) + timedelta(weeks=i) for i in range(12)]
        alerts = synthetic_alerts(60_000, 200_000, weeks, ["bank_a", "bank_b", "bank_c"], seed)
        assignments = assign_all(alerts, DEFAULT_WEIGHTS, seed)
        fees = {"bank_a": 3_500, "bank_b": 3_400, "bank_c": 2_500}
        out = simulate_intervention(alerts, assignments, params, seed, fees)
        rep = build_report(out, assignments)

        def within(observed, expected, n, what):
            se = np.sqrt(expected * (1 - expected) / n)
            assert abs(observed - expected) <= 2 * se, (what, observed, expected, se)

        for g in ("baseline_msg", "loss_aversion", "empowering"):
            s = rep.groups[g]
            within(s["open_rate"], params.open_rate(g), s["notifications"], f"open rate {g}")
        treated = [o for o in out if o.group != "control"]
        n_open = sum(o.opened for o in treated)
        within(sum(o.clicked for o in treated) / n_open, params.click_given_open, n_open, "click given open")
        base = params.base_rate
        c = rep.groups["control"]
        within(c["overdraft_rate"], base, c["notifications"], "control")
        sub = rep.subgroups
        within(sub["never_opened"]["overdraft_rate"], base * params.mult_no_open, sub["never_opened"]["notifications"], "never opened")
        within(sub["opened_no_click"]["overdraft_rate"], base * params.mult_open_no_click, sub["opened_no_click"]["notifications"], "open, no click")
        within(sub["clicked"]["overdraft_rate"], base * params.mult_click, sub["clicked"]["notifications"], "clicked")
        assert rep.savings > 0
        assert rep.tests["clicked_vs_control"]["p"] < 0.05
        assert time.perf_counter() - t0 < 120
        notes.append(f"savings {rep.savings / 100:,.0f} dollars, clicker p {rep.tests['clicked_vs_control']['p']:.2g}")


def test_c8_determinism(tmp_path):
    with criterion(8, "`all` twice gives identical manifests") as notes:
        cfg = {
            "seed": 8,
            "sim": {"n_customers": 450},
            "grid": [{"algorithm": "gbdt", "n_estimators": 100, "learning_rate": 0.1, "max_depth": 5, "subsample": 0.5}],
            "rct_weeks": 2,
        }
        digests = []
        for name in ("first", "second"):
            p = tmp_path / f"{name}.json"
            p.write_text(json.dumps({**cfg, "out": str(tmp_path / name)}))
            assert cli.main(["all", "--config", str(p)]) == 0
            man = sorted((tmp_path / name / "manifests").glob("*.json"))
            digests.append({m.name: cli.sha256_file(m) for m in man})
        assert len(digests[0]) == len(cli.STEPS)
        assert digests[0] == digests[1]
        notes.append(f"{len(digests[0])} manifests")

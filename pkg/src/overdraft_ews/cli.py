"""Batch command line: gen, label, featurize, train, select, score, simulate, report, all.

Exit codes: 0 success, 1 validation / configuration / missing-artifact error,
2 contract violation. Every subcommand writes ``manifests/<command>.json``
with the input and output hashes needed for an exact rerun.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import replace
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import backtest as bt
from . import report as rp
from .alerts import Alert, read_alerts_csv, score_week, write_alerts_csv
from .banksim import PostingContractError, SimConfigError, save_ledger_truth, simulate
from .config import ConfigError, RunConfig, load_config
from .domain import DatasetBundle, DatasetLoadError, DatasetValidationError, load_bundle, require_valid, save_bundle
from .features import FEATURE_COLUMNS, build_design_matrix, save_feature_spec, write_features_csv
from .labeling import LabelHorizonError, build_cohort, label_cohort, save_matchers, write_labels_csv
from .learners import FitError, Hyperparams, SchemaMismatchError, fit, gini_importance, load_model, save_model
from .ledger import LedgerIndex
from .rct import RctConfigError, VariantAssignment, assign_all, build_report, save_assignments, save_report, segments_from_alerts, simulate_intervention

log = logging.getLogger("overdraft_ews")

COMMANDS = ("gen", "label", "featurize", "train", "select", "score", "simulate", "report", "all")


class MissingArtifactError(Exception):
    """A subcommand needs a file an earlier subcommand should have written."""


class LockedError(Exception):
    pass


VALIDATION_ERRORS = (
    ConfigError, SimConfigError, RctConfigError, DatasetLoadError, DatasetValidationError,
    MissingArtifactError, LockedError, bt.SplitPlanError, FitError,
)
CONTRACT_ERRORS = (PostingContractError, SchemaMismatchError, LabelHorizonError, AssertionError)


# -- run context --------------------------------------------------------------


class Run:
    """Shared state for one invocation; the dataset is loaded once and reused."""

    def __init__(self, cfg: RunConfig, week: date | None = None):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.week = week
        self._bundle: DatasetBundle | None = None
        self._data_files: list[Path] = []
        self._index: LedgerIndex | None = None
        self._design: bt.WeeklyDesign | None = None
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    # files
    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, path: Path, hint: str) -> Path:
        if not path.is_file():
            raise MissingArtifactError(f"missing {path}: run `{hint}` first")
        self.inputs.append(path)
        return path

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    # data
    @property
    def bundle(self) -> DatasetBundle:
        if self._bundle is None:
            d = self.cfg.dataset_dir
            if not d.is_dir():
                raise MissingArtifactError(f"missing dataset directory {d}: run `gen` first or set data_dir")
            self._bundle = require_valid(load_bundle(d))
            self._data_files = sorted(p for p in d.iterdir() if p.is_file() and p.name != "ledger_truth.jsonl")
        # recorded on every use: under `all` the cached bundle feeds several steps
        self.inputs.extend(self._data_files)
        return self._bundle

    @property
    def index(self) -> LedgerIndex:
        if self._index is None:
            self._index = LedgerIndex(self.bundle)
        return self._index

    @property
    def design(self) -> bt.WeeklyDesign:
        if self._design is None:
            self._design = bt.WeeklyDesign(self.index, self.cfg.features)
        return self._design

    @property
    def banks(self) -> list[str]:
        available = self.index.bank_ids
        if self.cfg.banks is None:
            return list(available)
        unknown = sorted(set(self.cfg.banks) - set(available))
        if unknown:
            raise ConfigError(f"unknown bank id(s) {unknown}; dataset has {available}")
        return [b for b in available if b in self.cfg.banks]

    def plan(self) -> bt.SplitPlan:
        s = self.cfg.splits
        start = date.fromisoformat(s["start"]) if "start" in s else self.bundle.start
        end = date.fromisoformat(s["end"]) if "end" in s else self.bundle.end
        if start < self.bundle.start or end > self.bundle.end:
            raise ConfigError(f"split range {start}..{end} exceeds the data range {self.bundle.start}..{self.bundle.end}")
        return bt.make_weekly_splits(start, end, self.cfg.weekday)


# -- manifests ------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(run: Run, p: Path) -> str:
    try:
        return p.resolve().relative_to(run.out.resolve()).as_posix()
    except ValueError:
        return p.as_posix()


def config_fingerprint(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("out")  # the output location does not change results
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_manifest(run: Run, command: str) -> Path:
    import numba
    import pandas
    import scipy

    manifest = {
        "command": command,
        "seed": run.cfg.seed,
        "config_sha256": config_fingerprint(run.cfg),
        "week": run.week.isoformat() if run.week else None,
        "versions": {
            "overdraft_ews": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pandas.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "inputs": {_rel(run, p): sha256_file(p) for p in sorted(set(run.inputs), key=lambda p: _rel(run, p))},
        "outputs": {_rel(run, p): sha256_file(p) for p in sorted(set(run.outputs), key=lambda p: _rel(run, p))},
    }
    path = run.path("manifests", f"{command}.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands ----------------------------------------------------------------


def cmd_gen(run: Run) -> None:
    sim = run.cfg.sim_config()
    res = simulate(sim)
    d = run.out / "data"
    paths = save_bundle(res.bundle, d)
    truth = d / "ledger_truth.jsonl"
    save_ledger_truth(res.ledger_truth, truth)
    simcfg = d / "simconfig.json"
    simcfg.write_text(json.dumps(sim.to_dict(), indent=2, sort_keys=True) + "\n")
    run.wrote(*paths, truth, simcfg)
    if run.cfg.data_dir is None:
        run._bundle = None  # later steps read what was written


def _plan_dates(plan: bt.SplitPlan) -> list[date]:
    return sorted({d for s in plan for d in (s.train_as_of, s.test_as_of)})


def cmd_label(run: Run) -> None:
    banks = run.banks
    m = run.path("matchers.json")
    save_matchers({b: run.index.matchers[b] for b in banks}, m)
    run.wrote(m)
    for d in _plan_dates(run.plan()):
        p = run.path("labels", f"labels_{d.isoformat()}.csv")
        write_labels_csv(label_cohort(run.index, d, banks), p)
        run.wrote(p)


def cmd_featurize(run: Run) -> None:
    banks = run.banks
    s = run.path("feature_spec.json")
    save_feature_spec(run.cfg.features, s)
    run.wrote(s)
    for d in _plan_dates(run.plan()):
        cohort = build_cohort(run.index, d, banks)
        p = run.path("features", f"features_{d.isoformat()}.csv")
        if cohort:
            write_features_csv(build_design_matrix(cohort, d, run.cfg.features, run.index), p)
        else:
            rp.write_csv(p, ["customer_id", "account_id", "as_of_date", *FEATURE_COLUMNS], [])
        run.wrote(p)


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    plan = run.plan()
    p = run.path("splits.json")
    p.write_text(json.dumps({**plan.to_dict(), "pool_weeks": cfg.pool_weeks}, indent=1) + "\n")
    run.wrote(p)
    grid = cfg.hyperparams()
    for bank in run.banks:
        cards = bt.run_grid(bank, plan, grid, cfg.k_candidates, run.design, pool_weeks=cfg.pool_weeks)
        problems = bt.audit_leakage(plan, run.design, bank, cfg.pool_weeks)
        if problems:
            raise AssertionError(f"leakage audit failed for {bank}: {problems[:3]}")
        audit = run.path(f"leakage_{bank}.json")
        audit.write_text(json.dumps({"bank_id": bank, "splits": len(plan), "violations": problems}, indent=1) + "\n")
        cp = run.path(f"cards_{bank}.json")
        bt.save_cards(cards, cp)
        run.wrote(audit, cp)
        for i, c in enumerate(cards):
            if c.model is not None:
                mp = run.path("models", bank, f"card_{i:03d}.json")
                save_model(c.model, mp)
                run.wrote(mp)
        if cfg.include_rule:
            rule = bt.run_grid(bank, plan, [_rule_hp(cfg.seed)], cfg.k_candidates, run.design, pool_weeks=cfg.pool_weeks)
            bp = run.path(f"baseline_{bank}.json")
            bt.save_cards(rule, bp)
            run.wrote(bp)


def _rule_hp(seed: int) -> Hyperparams:
    from .learners import business_rule_hp

    return business_rule_hp(seed)


def _select_kwargs(cfg: RunConfig) -> dict:
    s = cfg.selection
    return {
        "k_percent": float(s.get("k_percent", 10.0)),
        "last_n": int(s.get("last_n", 4)),
        "tolerance": float(s.get("tolerance", 0.05)),
        "mode": s.get("mode", "relative"),
    }


def cmd_select(run: Run) -> None:
    for bank in run.banks:
        cards = bt.load_cards(run.need(run.out / f"cards_{bank}.json", "train"))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sel = bt.select_with_trail(cards, **_select_kwargs(run.cfg))
            k = bt.choose_k(sel.card, run.cfg.precision_target, last_n=len(sel.weeks))
        for w in caught:
            log.warning("%s: %s", bank, w.message)
        idx = cards.index(sel.card)
        doc = {
            "bank_id": bank,
            **sel.to_dict(),
            "chosen_k": k,
            "hyperparams": sel.card.hp.to_dict(),
            "model_file": f"models/{bank}/card_{idx:03d}.json",
            "warnings": sorted(str(w.message) for w in caught),
        }
        p = run.path(f"selection_{bank}.json")
        p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        run.wrote(p)


def _load_selection(run: Run, bank: str) -> dict:
    return json.loads(run.need(run.out / f"selection_{bank}.json", "select").read_text())


def training_dates_for(run: Run, week: date) -> list[date]:
    """Plan-eligible as-of dates whose label week has closed by ``week``, newest last."""
    plan = run.plan()
    first = plan.splits[0].train_as_of
    dates = []
    d = first
    while d + timedelta(days=7) <= week:
        dates.append(d)
        d += timedelta(days=7)
    return dates[-run.cfg.pool_weeks :]


def score_weeks(run: Run) -> list[date]:
    if run.week is not None:
        return [run.week]
    return run.plan().test_dates[-run.cfg.rct_weeks :]


def cmd_score(run: Run) -> None:
    weeks = score_weeks(run)
    selections = {b: _load_selection(run, b) for b in run.banks}
    all_alerts: list[Alert] = []
    per_week: dict[date, list[Alert]] = {}
    for w in weeks:
        if w.weekday() != run.cfg.weekday:
            raise ConfigError(f"score week {w} is not a weekday-{run.cfg.weekday} date")
        train_dates = training_dates_for(run, w)
        if not train_dates:
            raise ConfigError(f"no completed training week before {w}")
        for bank in run.banks:
            sel = selections[bank]
            hp = Hyperparams.from_dict(sel["hyperparams"])
            X, y = run.design.pooled(bank, train_dates)
            if len(y) < 2 or y.min() == y.max():
                log.warning("%s %s: training pool unusable, no alerts", bank, w)
                continue
            card = bt.ModelCard(bank, hp, k_percent=float(sel["chosen_k"]))
            card.model = fit(hp, X, y, columns=FEATURE_COLUMNS)
            alerts = score_week(card, run.index, w, run.cfg.features)
            per_week.setdefault(w, []).extend(alerts)
            all_alerts.extend(alerts)
    assignments = assign_all(all_alerts, run.cfg.weights, run.cfg.seed)
    variants = {c: a.group for c, a in assignments.items()}
    for w in weeks:
        p = run.path("alerts", f"alerts_{w.isoformat()}.csv")
        write_alerts_csv(per_week.get(w, []), p, variants)
        run.wrote(p)
    ap = run.path("assignments.json")
    save_assignments(assignments, ap)
    run.wrote(ap)


def cmd_simulate(run: Run) -> None:
    weeks = score_weeks(run)
    alerts: list[Alert] = []
    for w in weeks:
        alerts.extend(read_alerts_csv(run.need(run.out / "alerts" / f"alerts_{w.isoformat()}.csv", "score")))
    raw = json.loads(run.need(run.out / "assignments.json", "score").read_text())
    assignments = {
        r["customer_id"]: VariantAssignment(r["customer_id"], r["group"], date.fromisoformat(r["assigned_week"]) if r["assigned_week"] else None)
        for r in raw
    }
    cfg = run.cfg
    bp = run.path("behavior_params.json")
    bp.write_text(json.dumps(cfg.behavior.to_dict(), indent=2, sort_keys=True) + "\n")
    run.wrote(bp)
    rp_path = run.path("rct_report.json")
    if not alerts:
        rp_path.write_text(json.dumps({"notifications": 0}) + "\n")
        run.wrote(rp_path)
        return
    policies = {p.bank_id: p for p in run.bundle.policies}
    outcomes = simulate_intervention(
        alerts, assignments, cfg.behavior, cfg.seed,
        {b: p.fee_amount for b, p in policies.items()}, {b: p.max_fees_per_day for b, p in policies.items()},
    )
    rep = build_report(outcomes, assignments, segments_from_alerts(alerts, cfg.many_threshold))
    save_report(rep, rp_path)
    op = run.path("outcomes.csv")
    rp.write_csv(
        op, ["week", "customer_id", "bank_id", "group", "opened", "clicked", "overdrafted", "fees_paid"],
        [(o.week, o.customer_id, o.bank_id, o.group, int(o.opened), int(o.clicked), int(o.overdrafted), o.fees_paid) for o in outcomes],
    )
    run.wrote(rp_path, op)


def cmd_report(run: Run) -> None:
    cfg = run.cfg
    sel_kw = _select_kwargs(cfg)
    k_sel = sel_kw["k_percent"]
    fees = run.path("reports", "fees_per_bank.csv")
    rp.write_csv(fees, ["bank", "fees", "fee_total_cents", "accounts_charged"],
                 [r for r in rp.fees_per_bank(run.index) if r[0] in run.banks])
    weekly = run.path("reports", "overdrafts_per_week.csv")
    rp.write_csv(weekly, ["bank", "week_start", "fees", "accounts_charged"],
                 [r for r in rp.overdrafts_per_week(run.index, run.bundle.start, run.bundle.end) if r[0] in run.banks])
    curves, stab, metrics, table2, imps = [], [], [], [], []
    for bank in run.banks:
        cards = bt.load_cards(run.need(run.out / f"cards_{bank}.json", "train"))
        base_path = run.out / f"baseline_{bank}.json"
        baseline = bt.load_cards(run.need(base_path, "train"))[0] if cfg.include_rule else None
        sel = _load_selection(run, bank)
        winner = next(c for c in cards if c.hp.key() == sel["winner"])
        winner.k_percent = float(sel["chosen_k"])
        curves += rp.pr_curves(bank, cards, "grid") + (rp.pr_curves(bank, [baseline], "rule") if baseline else [])
        stab += rp.stability(bank, cards, k_sel, "grid") + (rp.stability(bank, [baseline], k_sel, "rule") if baseline else [])
        metrics += rp.metric_rows(bank, cards, baseline)
        weeks = [date.fromisoformat(w) for w in sel["weeks"]]
        table2.append(rp.table2_row(bank, winner, baseline, weeks))
        model = load_model(run.need(run.out / sel["model_file"], "train"))
        if model.algorithm in ("dtree", "rforest", "gbdt"):
            imps += rp.importance_rows(bank, gini_importance(model))
    outs = {
        "pr_curves.csv": (["bank", "role", "model", "k", "precision", "recall"], curves),
        "stability.csv": (["bank", "role", "model", "week", f"precision@{k_sel:g}"], stab),
        "metrics.csv": (["bank", "as_of", "model", "k", "precision", "recall", "auc", "prior", "lift_prior", "lift_rules"], metrics),
        "table2.csv": (list(rp.TABLE2_COLUMNS), table2),
        "importances.csv": (["bank", "feature", "importance", "rank"], imps),
    }
    run.wrote(fees, weekly)
    for name, (header, rows) in outs.items():
        p = run.path("reports", name)
        rp.write_csv(p, header, rows)
        run.wrote(p)


STEPS: dict[str, Callable[[Run], None]] = {
    "gen": cmd_gen,
    "label": cmd_label,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "select": cmd_select,
    "score": cmd_score,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# -- argument handling ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overdraft-ews", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="run configuration JSON")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--bank", action="append", help="restrict to this bank id; repeatable")
        p.add_argument("--week", type=date.fromisoformat, help="score / simulate a single week (YYYY-MM-DD)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.seed is not None:
        cfg = RunConfig(seed=args.seed)
    else:
        raise ConfigError("need --config or --seed (runs are never seeded from the clock)")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.bank:
        changes["banks"] = tuple(args.bank)
    if args.seed is not None and args.seed < 0:
        raise ConfigError("seed must be nonnegative")
    return replace(cfg, **changes) if changes else cfg


class _Lock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{self.path} exists: another command is using this output directory (remove it if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_command(command: str, cfg: RunConfig, week: date | None = None) -> Run:
    run = Run(cfg, week)
    with _Lock(cfg.out_dir):
        names = list(STEPS) if command == "all" else [command]
        for name in names:
            run.inputs, run.outputs = [], []
            log.info("running %s", name)
            STEPS[name](run)
            write_manifest(run, name)
    return run


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run_command(args.command, cfg, args.week)
    except CONTRACT_ERRORS as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

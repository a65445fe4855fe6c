"""Sticky variant assignment, a behaviour simulator for alert outcomes, and
the trial report (rates, fee savings, ability-to-respond breakdown).

Outcome states for a treated notification are disjoint: not opened, opened
without clicking, clicked. Each state scales the base weekly overdraft
probability by its own multiplier.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

GROUPS = ("control", "baseline_msg", "loss_aversion", "empowering")
VARIANTS = GROUPS[1:]
DEFAULT_WEIGHTS = (0.2, 0.8 / 3, 0.8 / 3, 0.8 / 3)
SEGMENTS = ("high", "medium", "low")


class RctConfigError(ValueError):
    pass


# -- assignment -------------------------------------------------------------


@dataclass(frozen=True)
class VariantAssignment:
    customer_id: str
    group: str
    assigned_week: date | None = None


def _check_weights(weights: Sequence[float]) -> tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if len(w) != len(GROUPS):
        raise RctConfigError(f"need {len(GROUPS)} weights, got {len(w)}")
    if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise RctConfigError(f"weights must be nonnegative and sum to 1, got {w}")
    return w


def hash_uniform(seed: int, *parts) -> float:
    """Deterministic U[0, 1) from a seed and identifying parts."""
    key = ":".join([str(int(seed)), *map(str, parts)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2.0**64


def assign_variant(
    customer_id: str,
    existing: Mapping[str, VariantAssignment] | None = None,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    seed: int = 0,
    week: date | None = None,
) -> VariantAssignment:
    """Existing assignment if any; otherwise a hash draw on (seed, customer_id)."""
    w = _check_weights(weights)
    if existing is not None and customer_id in existing:
        return existing[customer_id]
    u = hash_uniform(seed, "assign", customer_id)
    edges = np.cumsum(w)
    g = int(np.searchsorted(edges, u, side="right"))
    g = min(g, len(GROUPS) - 1)
    while w[g] == 0:  # u landed on float slack past the last positive weight
        g -= 1
    return VariantAssignment(customer_id, GROUPS[g], week)


def assign_all(alerts: Iterable, weights=DEFAULT_WEIGHTS, seed: int = 0, existing=None) -> dict[str, VariantAssignment]:
    """Sticky assignments for every alerted customer, first alert week recorded."""
    out = dict(existing or {})
    for a in sorted(alerts, key=lambda a: (a.week, a.customer_id)):
        if a.customer_id not in out:
            out[a.customer_id] = assign_variant(a.customer_id, out, weights, seed, a.week)
    return out


# -- behaviour --------------------------------------------------------------


@dataclass(frozen=True)
class BehaviorParams:
    open_prob: tuple[tuple[str, float], ...] = (("baseline_msg", 0.30), ("empowering", 0.21), ("loss_aversion", 0.22))
    click_given_open: float = 0.25
    mult_open_no_click: float = 1 - 0.0371
    mult_click: float = 1 - 0.1286
    mult_no_open: float = 1.0
    base_rate: float = 0.27
    multi_fee: bool = False
    extra_fee_prob: float = 0.3  # chance of each further same-week fee when multi_fee is on

    def __post_init__(self):
        probs = [p for _, p in self.open_prob] + [self.click_given_open, self.base_rate, self.extra_fee_prob]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise RctConfigError("probabilities must lie in [0, 1]")
        if any(not 0.0 < m <= 1.0 for m in (self.mult_open_no_click, self.mult_click, self.mult_no_open)):
            raise RctConfigError("multipliers must lie in (0, 1]")
        if sorted(v for v, _ in self.open_prob) != sorted(VARIANTS):
            raise RctConfigError(f"open_prob must name exactly {VARIANTS}")

    def open_rate(self, variant: str) -> float:
        return dict(self.open_prob)[variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["open_prob"] = dict(self.open_prob)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorParams":
        d = dict(d)
        if "open_prob" in d:
            d["open_prob"] = tuple(sorted(dict(d["open_prob"]).items()))
        return cls(**d)


@dataclass(frozen=True)
class Outcome:
    week: date
    customer_id: str
    bank_id: str
    group: str
    opened: bool
    clicked: bool
    overdrafted: bool
    fees_paid: int


def _customer_rng(seed: int, customer_id: str) -> np.random.Generator:
    h = int.from_bytes(hashlib.sha256(f"{int(seed)}:outcome:{customer_id}".encode()).digest()[:8], "big")
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, h])


def simulate_intervention(
    alerts: Sequence,
    assignments: Mapping[str, VariantAssignment],
    params: BehaviorParams,
    seed: int,
    fee_amounts: Mapping[str, int],
    max_fees: Mapping[str, int] | None = None,
) -> list[Outcome]:
    """One outcome per alert. Draws come from a per-customer stream, consumed in
    week order, so the result does not depend on alert order."""
    by_cust: dict[str, list] = {}
    for a in alerts:
        if a.customer_id not in assignments:
            raise KeyError(f"customer {a.customer_id} has no variant assignment")
        by_cust.setdefault(a.customer_id, []).append(a)
    out = []
    for cid in sorted(by_cust):
        group = assignments[cid].group
        rng = _customer_rng(seed, cid)
        for a in sorted(by_cust[cid], key=lambda a: (a.week, a.account_id)):
            u_open, u_click, u_od, u_extra = rng.random(4)
            opened = clicked = False
            mult = 1.0
            if group != "control":
                opened = bool(u_open < params.open_rate(group))
                clicked = opened and bool(u_click < params.click_given_open)
                mult = params.mult_click if clicked else params.mult_open_no_click if opened else params.mult_no_open
            od = bool(u_od < params.base_rate * mult)
            n_fees = int(od)
            q = params.extra_fee_prob
            if od and params.multi_fee and q > 0:
                # geometric number of further fees, P(extra >= m) = q**m, capped by the bank's daily cap
                cap = (max_fees or {}).get(a.bank_id, 1)
                extra = cap if q >= 1 else int(math.floor(math.log(max(u_extra, 1e-300)) / math.log(q)))
                n_fees = min(cap, 1 + extra)
            out.append(Outcome(a.week, cid, a.bank_id, group, opened, clicked, od, n_fees * int(fee_amounts[a.bank_id])))
    return out


# -- ability segments -------------------------------------------------------


def segment_ability(rows: Mapping, many_threshold: int = 3) -> dict:
    """unit -> high / medium / low from (recomputed balance, overdraft count).

    ``rows`` maps a unit key to anything with ``f_recomputed_balance`` and
    ``f_od_count_6m`` (attributes or keys). Negative balance with few
    overdrafts falls in medium.
    """
    out = {}
    for unit, r in rows.items():
        bal = r["f_recomputed_balance"] if isinstance(r, Mapping) else r.f_recomputed_balance
        n = r["f_od_count_6m"] if isinstance(r, Mapping) else r.f_od_count_6m
        many = n >= many_threshold
        if bal > 0:
            out[unit] = "medium" if many else "high"
        else:
            out[unit] = "low" if many else "medium"
    return out


def segments_from_alerts(alerts: Sequence, many_threshold: int = 3) -> dict[tuple, str]:
    rows = {(a.week, a.customer_id): {"f_recomputed_balance": a.balance, "f_od_count_6m": a.total_overdrafts_6m} for a in alerts}
    return segment_ability(rows, many_threshold)


# -- report -----------------------------------------------------------------


def two_proportion_z(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sided z test; returns (z, p)."""
    if n1 == 0 or n2 == 0:
        return float("nan"), float("nan")
    p = (x1 + x2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (x1 / n1 - x2 / n2) / se
    return float(z), float(2 * norm.sf(abs(z)))


def _rate(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class RctReport:
    groups: dict = field(default_factory=dict)
    participants: int = 0
    notifications: int = 0
    subgroups: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)
    savings: int = 0
    mean_fee_difference: float | None = None
    segments: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(
    outcomes: Sequence[Outcome],
    assignments: Mapping[str, VariantAssignment],
    segments: Mapping | None = None,
) -> RctReport:
    if not outcomes:
        raise ValueError("no outcomes to report")
    rep = RctReport()
    people = {g: set() for g in GROUPS}
    stats = {g: dict(notifications=0, opened=0, clicked=0, overdrafted=0, fees=0) for g in GROUPS}
    fees_by_customer: dict[str, int] = {}
    for o in outcomes:
        s = stats[o.group]
        people[o.group].add(o.customer_id)
        s["notifications"] += 1
        s["opened"] += o.opened
        s["clicked"] += o.clicked
        s["overdrafted"] += o.overdrafted
        s["fees"] += o.fees_paid
        fees_by_customer[o.customer_id] = fees_by_customer.get(o.customer_id, 0) + o.fees_paid
    for g in GROUPS:
        s = stats[g]
        rep.groups[g] = {
            "participants": len(people[g]),
            "notifications": s["notifications"],
            "open_rate": _rate(s["opened"], s["notifications"]),
            "click_rate": _rate(s["clicked"], s["notifications"]),
            "click_given_open": _rate(s["clicked"], s["opened"]),
            "overdraft_rate": _rate(s["overdrafted"], s["notifications"]),
            "fees_paid": s["fees"],
        }
    rep.participants = sum(len(p) for p in people.values())
    rep.notifications = len(outcomes)

    treated = [o for o in outcomes if o.group != "control"]
    ctrl = stats["control"]

    def sub(name, rows):
        rep.subgroups[name] = {
            "notifications": len(rows),
            "overdrafted": sum(o.overdrafted for o in rows),
            "overdraft_rate": _rate(sum(o.overdrafted for o in rows), len(rows)),
        }
        z, p = two_proportion_z(rep.subgroups[name]["overdrafted"], len(rows), ctrl["overdrafted"], ctrl["notifications"])
        rep.tests[f"{name}_vs_control"] = {"z": z, "p": p}

    sub("treatment", treated)
    sub("never_opened", [o for o in treated if not o.opened])
    sub("opened", [o for o in treated if o.opened])
    sub("opened_no_click", [o for o in treated if o.opened and not o.clicked])
    sub("clicked", [o for o in treated if o.clicked])
    opened_all = sum(o.opened for o in treated)
    rep.subgroups["treatment"]["open_rate"] = _rate(opened_all, len(treated))

    n_ctrl = len(people["control"])
    n_treat = sum(len(people[g]) for g in VARIANTS)
    treat_fees = sum(stats[g]["fees"] for g in VARIANTS)
    if ctrl["notifications"]:
        # scaled by notifications: customers differ in how many alerts they get
        rep.savings = int(round(ctrl["fees"] * len(treated) / ctrl["notifications"])) - treat_fees
    if n_ctrl and n_treat:
        rep.mean_fee_difference = ctrl["fees"] / n_ctrl - treat_fees / n_treat

    if segments is not None:
        seg_rows: dict[str, list[Outcome]] = {s: [] for s in SEGMENTS}
        for o in outcomes:
            key = (o.week, o.customer_id)
            seg = segments.get(key, segments.get(o.customer_id))
            if seg is None:
                raise KeyError(f"no ability segment for {key}")
            seg_rows[seg].append(o)
        for s, rows in seg_rows.items():
            tr = [o for o in rows if o.group != "control"]
            rep.segments[s] = {
                "notifications": len(rows),
                "overdraft_rate": _rate(sum(o.overdrafted for o in rows), len(rows)),
                "open_rate": _rate(sum(o.opened for o in tr), len(tr)),
            }
    return rep


def save_report(rep: RctReport, path) -> None:
    Path(path).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")


def save_assignments(assignments: Mapping[str, VariantAssignment], path) -> None:
    rows = [
        {"customer_id": a.customer_id, "group": a.group, "assigned_week": a.assigned_week.isoformat() if a.assigned_week else None}
        for _, a in sorted(assignments.items())
    ]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def synthetic_alerts(n_customers: int, n_notifications: int, weeks: Sequence[date], bank_ids: Sequence[str], seed: int) -> list:
    """Stand-in alert stream for simulator studies: every customer gets at least
    one notification, the rest are spread at random over customers and weeks."""
    from .alerts import Alert

    if n_notifications < n_customers:
        raise ValueError("need at least one notification per customer")
    n_weeks = len(weeks)
    if n_notifications > n_customers * n_weeks:
        raise ValueError("more notifications than (customer, week) slots")
    rng = np.random.default_rng(seed)
    first = np.arange(n_customers) * n_weeks + rng.integers(0, n_weeks, n_customers)
    rest = np.setdiff1d(np.arange(n_customers * n_weeks), first)
    extra = rng.choice(rest, n_notifications - n_customers, replace=False)
    pairs = [divmod(int(s), n_weeks) for s in np.sort(np.concatenate([first, extra]))]
    width = len(str(n_customers))
    out = []
    for c, w in pairs:
        cid = f"rct{c:0{width}d}"
        out.append(Alert(weeks[w], cid, f"{cid}-chk", bank_ids[c % len(bank_ids)], 0, 1, 0, False, 183, 0))
    return out

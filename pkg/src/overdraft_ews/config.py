"""Run configuration: one JSON document drives every subcommand."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Any

from .backtest import DEFAULT_K, DEFAULT_POOL_WEEKS, FRIDAY
from .banksim import ArchetypeConfig, SimConfig, default_sim_config
from .domain import BankPolicy
from .features import FeatureSpec
from .learners import Hyperparams, production_grid, table_a1_grid
from .rct import DEFAULT_WEIGHTS, BehaviorParams, _check_weights


class ConfigError(ValueError):
    pass


GRID_PRESETS = ("production", "table_a1", "gbdt")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str = "run"
    data_dir: str | None = None  # existing dataset; None means `gen` writes <out>/data
    sim: dict = field(default_factory=lambda: {"n_customers": 10_000})
    banks: tuple[str, ...] | None = None
    features: FeatureSpec = FeatureSpec()
    grid: Any = "production"  # preset name or list of hyperparameter dicts
    include_rule: bool = True
    splits: dict = field(default_factory=dict)  # start, end, weekday, pool_weeks
    k_candidates: tuple[float, ...] = DEFAULT_K
    selection: dict = field(default_factory=lambda: {"k_percent": 10.0, "last_n": 4, "tolerance": 0.05, "mode": "relative"})
    precision_target: tuple[float, float] = (0.4, 0.5)
    behavior: BehaviorParams = BehaviorParams()
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    rct_weeks: int = 12
    many_threshold: int = 3

    def __post_init__(self):
        if isinstance(self.grid, str) and self.grid not in GRID_PRESETS:
            raise ConfigError(f"unknown grid preset {self.grid!r}; expected one of {GRID_PRESETS}")
        if not self.k_candidates or any(not 0 < float(k) <= 100 for k in self.k_candidates):
            raise ConfigError("k_candidates must be percentages in (0, 100]")
        if self.rct_weeks < 1:
            raise ConfigError("rct_weeks must be >= 1")
        try:
            _check_weights(self.weights)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        unknown = set(self.splits) - {"start", "end", "weekday", "pool_weeks"}
        if unknown:
            raise ConfigError(f"unknown splits keys {sorted(unknown)}")

    # -- derived pieces -------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out_dir / "data"

    @property
    def pool_weeks(self) -> int:
        return int(self.splits.get("pool_weeks", DEFAULT_POOL_WEEKS))

    @property
    def weekday(self) -> int:
        return int(self.splits.get("weekday", FRIDAY))

    def sim_config(self) -> SimConfig:
        s = dict(self.sim)
        kw: dict[str, Any] = {"seed": int(s.pop("seed", self.seed))}
        if "n_customers" in s:
            kw["n_customers"] = int(s.pop("n_customers"))
        for key in ("start", "end"):
            if key in s:
                kw[key] = date.fromisoformat(s.pop(key))
        if "archetypes" in s:
            kw["archetypes"] = [ArchetypeConfig(**_tuples(a)) for a in s.pop("archetypes")]
        if "policies" in s:
            kw["policies"] = [BankPolicy.from_dict(p) for p in s.pop("policies")]
        extra = {k: s.pop(k) for k in ("snapshot_every_days", "credits_first") if k in s}
        if s:
            raise ConfigError(f"unknown sim keys {sorted(s)}")
        try:
            return replace(default_sim_config(**kw), **extra)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def hyperparams(self) -> list[Hyperparams]:
        if isinstance(self.grid, str):
            if self.grid == "production":
                return production_grid(self.seed)
            if self.grid == "table_a1":
                return table_a1_grid(seed=self.seed)
            return table_a1_grid(("gbdt",), seed=self.seed)
        out = []
        for d in self.grid:
            d = dict(d)
            algorithm = d.pop("algorithm")
            off_grid = bool(d.pop("off_grid", False))
            try:
                out.append(Hyperparams.make(algorithm, int(d.pop("seed", self.seed)), off_grid, **d))
            except ValueError as e:
                raise ConfigError(f"bad grid entry: {e}") from e
        if not out:
            raise ConfigError("empty grid")
        return out

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = self.features.to_dict()
        d["behavior"] = self.behavior.to_dict()
        d["banks"] = list(self.banks) if self.banks is not None else None
        d["k_candidates"] = [float(k) for k in self.k_candidates]
        d["weights"] = list(self.weights)
        d["precision_target"] = list(self.precision_target)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "seed" not in d:
            raise ConfigError("config must set a seed")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "features" in d:
                d["features"] = FeatureSpec.from_dict(d["features"])
            if "behavior" in d:
                d["behavior"] = BehaviorParams.from_dict(d["behavior"])
            for key in ("banks", "k_candidates", "weights", "precision_target"):
                if d.get(key) is not None:
                    d[key] = tuple(d[key])
            d["seed"] = int(d["seed"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

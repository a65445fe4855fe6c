"""From-scratch binary classifiers behind one fit / predict_scores surface."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import linear, nn, trees

ALGORITHMS = ("logreg", "dtree", "rforest", "gbdt", "ffnn")

# the model grid searched in the original study
TABLE_A1 = {
    "logreg": {"penalty": ("l1", "l2"), "C": (1e-5, 1e-3, 0.1, 1.0, 10.0)},
    "rforest": {
        "n_estimators": (100, 1000),
        "max_depth": (10, 50),
        "max_features": ("sqrt", "log2"),
        "min_samples_split": (2, 10),
    },
    "gbdt": {
        "n_estimators": (100, 1000, 10000),
        "learning_rate": (0.01, 0.1, 0.5),
        "subsample": (0.1, 0.5, 1.0),
        "max_depth": (5, 10),
    },
    "dtree": {"criterion": ("gini",), "max_depth": (1, 5, 10, 20, 100)},
    "ffnn": {
        "learning_rate": (1e-4, 1e-3, 1e-2),
        "hidden_size": (128, 256, 512),
        "dropout": (0.25,),
        "epochs": (10, 30),
    },
}

DEFAULTS = {
    "logreg": {"penalty": "l2", "C": 1.0},
    "rforest": {"n_estimators": 100, "max_depth": 10, "max_features": "sqrt", "min_samples_split": 2, "bootstrap": True},
    "gbdt": {"n_estimators": 100, "learning_rate": 0.1, "subsample": 0.5, "max_depth": 5},
    "dtree": {"criterion": "gini", "max_depth": 5, "min_samples_split": 2},
    "ffnn": {"learning_rate": 1e-3, "hidden_size": 128, "dropout": 0.25, "epochs": 10},
}

TREE_ALGORITHMS = ("dtree", "rforest", "gbdt")
BUSINESS_RULE_DEPTH = 2


class FitError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


class UnsupportedModelError(TypeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    """One point of the model grid.

    ``off_grid`` admits settings outside the searched grid (the depth-2
    business rule, small test configurations); everything else must come
    from the grid.
    """

    algorithm: str
    params: tuple = ()
    seed: int = 0
    off_grid: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        given = dict(self.params)
        unknown = set(given) - set(DEFAULTS[self.algorithm])
        if unknown:
            raise ValueError(f"{self.algorithm}: unknown settings {sorted(unknown)}")
        merged = {**DEFAULTS[self.algorithm], **given}
        object.__setattr__(self, "params", tuple(sorted(merged.items())))
        if not self.off_grid:
            grid = TABLE_A1[self.algorithm]
            for k, allowed in grid.items():
                if merged[k] not in allowed:
                    raise ValueError(f"{self.algorithm}.{k}={merged[k]!r} is not in the grid {allowed}")
        self._check_ranges(merged)

    def _check_ranges(self, p):
        a = self.algorithm
        if a == "logreg":
            if p["penalty"] not in ("l1", "l2") or not p["C"] > 0:
                raise ValueError(f"bad logreg settings {p}")
        elif a in ("dtree", "rforest", "gbdt"):
            if int(p["max_depth"]) < 1:
                raise ValueError("max_depth must be >= 1")
        if a in ("rforest", "gbdt") and int(p["n_estimators"]) < 1:
            raise ValueError("n_estimators must be >= 1")
        if a == "gbdt" and not (0 < p["subsample"] <= 1 and p["learning_rate"] > 0):
            raise ValueError(f"bad gbdt settings {p}")
        if a == "ffnn" and not (0 <= p["dropout"] < 1 and p["learning_rate"] > 0 and p["hidden_size"] >= 1):
            raise ValueError(f"bad ffnn settings {p}")

    @classmethod
    def make(cls, algorithm: str, seed: int = 0, off_grid: bool = False, **settings) -> "Hyperparams":
        return cls(algorithm, tuple(sorted(settings.items())), seed, off_grid)

    def get(self, key: str) -> Any:
        return dict(self.params)[key]

    def key(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in self.params)
        return f"{self.algorithm}({inner})"

    def size(self) -> tuple:
        """Ordering key for "smaller model" tie-breaks."""
        p = dict(self.params)
        return (
            int(p.get("n_estimators", 1)),
            int(p.get("max_depth", 0)),
            int(p.get("hidden_size", 0)),
            int(p.get("epochs", 0)),
        )

    def with_seed(self, seed: int) -> "Hyperparams":
        return Hyperparams(self.algorithm, self.params, seed, self.off_grid)

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "params": dict(self.params), "seed": self.seed, "off_grid": self.off_grid}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(d["algorithm"], tuple(sorted(d.get("params", {}).items())), int(d.get("seed", 0)), bool(d.get("off_grid", False)))


def table_a1_grid(algorithms: Sequence[str] = ALGORITHMS, seed: int = 0) -> list[Hyperparams]:
    out = []
    for a in algorithms:
        grid = TABLE_A1[a]
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            out.append(Hyperparams(a, tuple(zip(keys, combo)), seed))
    return out


def production_grid(seed: int = 0) -> list[Hyperparams]:
    """Distinct GBDT settings deployed across banks in the original study."""
    configs = [(0.01, 10), (0.1, 5), (0.01, 5)]
    return [
        Hyperparams.make("gbdt", seed, n_estimators=100, learning_rate=lr, max_depth=d, subsample=0.5)
        for lr, d in configs
    ]


def business_rule_hp(seed: int = 0) -> Hyperparams:
    return Hyperparams.make("dtree", seed, off_grid=True, max_depth=BUSINESS_RULE_DEPTH)


@dataclass(eq=False)
class Model:
    algorithm: str
    hp: Hyperparams
    columns: tuple[str, ...]
    seed: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "overdraft-ews-model/1",
            "algorithm": self.algorithm,
            "hyperparams": self.hp.to_dict(),
            "columns": list(self.columns),
            "seed": self.seed,
            "params": _jsonable(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        algorithm = d["algorithm"]
        params = dict(d["params"])
        if algorithm in ("dtree",):
            params["tree"] = trees.Tree.from_dict(params["tree"])
        elif algorithm == "rforest":
            params["trees"] = [trees.Tree.from_dict(t) for t in params["trees"]]
        elif algorithm == "gbdt":
            params["trees"] = [trees.Tree.from_dict(t) for t in params["trees"]]
        elif algorithm == "ffnn":
            params["weights"] = [np.asarray(w, dtype=np.float64) for w in params["weights"]]
        for k in ("mean", "scale", "coef"):
            if k in params:
                params[k] = np.asarray(params[k], dtype=np.float64)
        return cls(algorithm, Hyperparams.from_dict(d["hyperparams"]), tuple(d["columns"]), int(d["seed"]), params)


def _jsonable(obj):
    if isinstance(obj, trees.Tree):
        return obj.to_dict()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_model(path) -> Model:
    return Model.from_dict(json.loads(Path(path).read_text()))


def _as_matrix(X, columns=None) -> tuple[np.ndarray, tuple[str, ...] | None]:
    if hasattr(X, "columns") and hasattr(X, "X"):  # DesignMatrix
        return np.asarray(X.X, dtype=np.float64), tuple(X.columns)
    if hasattr(X, "columns") and hasattr(X, "to_numpy"):  # DataFrame
        return X.to_numpy(dtype=np.float64), tuple(str(c) for c in X.columns)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    return arr, (tuple(columns) if columns is not None else None)


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def fit(hp: Hyperparams, X, y, seed: int | None = None, columns: Sequence[str] | None = None) -> Model:
    """Train one model. Deterministic given ``seed`` (default: hp.seed)."""
    seed = hp.seed if seed is None else int(seed)
    Xa, cols = _as_matrix(X, columns)
    if cols is None:
        cols = tuple(f"x{j}" for j in range(Xa.shape[1]))
    y = np.asarray(y).astype(np.float64).ravel()
    if len(y) != Xa.shape[0] or len(y) < 2:
        raise FitError(f"need at least 2 aligned rows, got X {Xa.shape[0]} and y {len(y)}")
    if not np.isfinite(Xa).all():
        raise FitError("feature matrix contains NaN or infinite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise FitError("labels must be boolean")
    single_class = y.min() == y.max()
    if single_class and hp.algorithm in ("logreg", "ffnn", "gbdt"):
        raise FitError(f"{hp.algorithm} needs both classes in the training labels")
    p = dict(hp.params)
    a = hp.algorithm
    params: dict = {}
    if a == "dtree":
        params["tree"] = trees.fit_tree(
            Xa, y, max_depth=int(p["max_depth"]), min_samples_split=int(p.get("min_samples_split", 2)), seed=seed
        )
    elif a == "rforest":
        params["trees"] = trees.fit_forest(
            Xa, y, n_estimators=int(p["n_estimators"]), max_depth=int(p["max_depth"]),
            max_features=p["max_features"], min_samples_split=int(p["min_samples_split"]),
            seed=seed, bootstrap=bool(p.get("bootstrap", True)),
        )
    elif a == "gbdt":
        boosted = trees.fit_gbdt(
            Xa, y, n_estimators=int(p["n_estimators"]), learning_rate=float(p["learning_rate"]),
            subsample=float(p["subsample"]), max_depth=int(p["max_depth"]), seed=seed,
        )
        params.update(init=boosted.init, trees=boosted.trees, scales=boosted.scales, train_loss=boosted.train_loss)
    elif a == "logreg":
        mean, scale = _standardize(Xa)
        coef, intercept = linear.fit_logreg((Xa - mean) / scale, y, C=float(p["C"]), penalty=p["penalty"])
        params.update(mean=mean, scale=scale, coef=coef, intercept=intercept)
    elif a == "ffnn":
        mean, scale = _standardize(Xa)
        weights = nn.fit_ffnn(
            (Xa - mean) / scale, y, hidden_size=int(p["hidden_size"]), learning_rate=float(p["learning_rate"]),
            epochs=int(p["epochs"]), dropout=float(p["dropout"]), seed=seed,
        )
        params.update(mean=mean, scale=scale, weights=weights)
    return Model(a, hp.with_seed(seed), tuple(cols), seed, params)


def fit_business_rule(X, y, seed: int = 0, columns: Sequence[str] | None = None) -> Model:
    """The 2-deep decision tree baseline."""
    return fit(business_rule_hp(seed), X, y, seed, columns)


def predict_scores(model: Model, X, columns: Sequence[str] | None = None) -> np.ndarray:
    Xa, cols = _as_matrix(X, columns)
    if cols is not None and tuple(cols) != tuple(model.columns):
        raise SchemaMismatchError(f"expected columns {list(model.columns)}, got {list(cols)}")
    if Xa.shape[1] != len(model.columns):
        raise SchemaMismatchError(f"expected {len(model.columns)} columns {list(model.columns)}, got {Xa.shape[1]}")
    if not np.isfinite(Xa).all():
        raise ValueError("feature matrix contains NaN or infinite values")
    a, p = model.algorithm, model.params
    if a == "dtree":
        s = p["tree"].predict(Xa)
    elif a == "rforest":
        s = np.mean([t.predict(Xa) for t in p["trees"]], axis=0)
    elif a == "gbdt":
        F = np.full(Xa.shape[0], float(p["init"]))
        for t, eta in zip(p["trees"], p["scales"]):
            if eta != 0.0:
                F += eta * t.predict(Xa)
        s = trees._logistic(F)
    elif a == "logreg":
        z = ((Xa - p["mean"]) / p["scale"]) @ p["coef"] + p["intercept"]
        s = trees._logistic(z)
    elif a == "ffnn":
        s = nn.predict_ffnn(p["weights"], (Xa - p["mean"]) / p["scale"])
    else:
        raise UnsupportedModelError(a)
    return np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)


def gini_importance(model: Model) -> dict[str, float]:
    if model.algorithm not in TREE_ALGORITHMS:
        raise UnsupportedModelError(f"gini importance needs a tree model, got {model.algorithm}")
    tlist = [model.params["tree"]] if model.algorithm == "dtree" else model.params["trees"]
    w = trees.importance_of(tlist, len(model.columns))
    return {c: float(v) for c, v in zip(model.columns, w)}


def training_loss(model: Model) -> list[float]:
    if model.algorithm != "gbdt":
        raise UnsupportedModelError("per-round training loss is recorded for gbdt only")
    return list(model.params["train_loss"])


__all__ = [
    "ALGORITHMS",
    "FitError",
    "Hyperparams",
    "Model",
    "SchemaMismatchError",
    "TABLE_A1",
    "UnsupportedModelError",
    "business_rule_hp",
    "fit",
    "fit_business_rule",
    "gini_importance",
    "load_model",
    "predict_scores",
    "production_grid",
    "save_model",
    "table_a1_grid",
    "training_loss",
]

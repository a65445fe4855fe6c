"""Decision tree, random forest and stochastic gradient boosting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._tree import LEAF, apply_binned, apply_raw, bin_features, build_tree, make_cuts, pad_cuts


@dataclass
class Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    weight: np.ndarray
    importance: np.ndarray  # squared-error decrease per feature
    bin_thr: np.ndarray | None = None  # training-time bin thresholds, not persisted

    @property
    def n_internal(self) -> int:
        return int((self.feature != LEAF).sum())

    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=np.int64)
        for i in range(len(self.feature)):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max(initial=0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return apply_raw(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "weight": self.weight.tolist(),
            "importance": self.importance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            np.asarray(d["weight"], dtype=np.float64),
            np.asarray(d["importance"], dtype=np.float64),
        )


class Binned:
    """Training matrix binned once and reused for every tree."""

    def __init__(self, X: np.ndarray):
        self.cuts = make_cuts(X)
        self.Xb = bin_features(X, self.cuts)
        self.cut_table, self.n_cuts = pad_cuts(self.cuts)

    def grow(self, y, w, max_depth, min_samples_split=2, max_features=None, seed=0) -> Tree:
        F = self.Xb.shape[1]
        mf = F if max_features is None else int(max_features)
        f, b, l, r, v, wt, imp = build_tree(
            self.Xb, self.n_cuts, np.ascontiguousarray(y, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
            int(max_depth), int(min_samples_split), mf, int(seed) % (2**32),
        )
        thr = np.where(f >= 0, self.cut_table[np.maximum(f, 0), np.minimum(b, self.cut_table.shape[1] - 1)], 0.0)
        return Tree(f, thr, l, r, v, wt, imp, b)

    def leaves(self, tree: Tree) -> np.ndarray:
        """Leaf of every training row (same routing as raw thresholds)."""
        return apply_binned(self.Xb, tree.feature, tree.bin_thr, tree.left, tree.right)


def resolve_max_features(spec, n_features: int) -> int:
    if spec is None:
        return n_features
    if spec == "sqrt":
        return max(1, int(math.sqrt(n_features)))
    if spec == "log2":
        return max(1, int(math.log2(n_features)))
    if isinstance(spec, float) and 0 < spec <= 1:
        return max(1, int(spec * n_features))
    return max(1, min(n_features, int(spec)))


def fit_tree(X, y, *, max_depth, min_samples_split=2, max_features=None, seed=0, sample_weight=None) -> Tree:
    binned = Binned(X)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    return binned.grow(y, w, max_depth, min_samples_split, resolve_max_features(max_features, X.shape[1]), seed)


def fit_forest(X, y, *, n_estimators, max_depth, max_features, min_samples_split, seed, bootstrap=True) -> list[Tree]:
    rng = np.random.default_rng(seed)
    binned = Binned(X)
    n = len(y)
    mf = resolve_max_features(max_features, X.shape[1])
    trees = []
    for _ in range(n_estimators):
        w = rng.multinomial(n, np.full(n, 1.0 / n)).astype(np.float64) if bootstrap else np.ones(n)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        trees.append(binned.grow(y, w, max_depth, min_samples_split, mf, tree_seed))
    return trees


MAX_HALVINGS = 20  # 2**-20 of the learning rate is no step at all


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_loss_from_logit(y: np.ndarray, F: np.ndarray) -> float:
    """Mean binomial deviance / 2, i.e. mean logistic loss, computed stably."""
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


@dataclass
class Boosted:
    init: float
    trees: list[Tree]
    scales: list[float]  # learning rate actually applied to each tree
    train_loss: list[float] = field(default_factory=list)

    def decision(self, X: np.ndarray) -> np.ndarray:
        F = np.full(X.shape[0], self.init)
        for t, s in zip(self.trees, self.scales):
            if s != 0.0:
                F += s * t.predict(X)
        return F


def fit_gbdt(X, y, *, n_estimators, learning_rate, subsample, max_depth, seed, min_samples_split=2) -> Boosted:
    """Stochastic gradient boosting on the logistic loss.

    Each round fits a regression tree to the residuals y - p on a row
    subsample drawn without replacement, sets leaf values by one Newton step
    (sum r / sum p(1-p) over the in-bag rows of the leaf), and applies the
    tree with the learning rate. If that step would raise the full training
    loss the step is halved until it does not (at most MAX_HALVINGS times,
    after which the tree is kept with step 0), so the recorded loss never
    increases.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    rng = np.random.default_rng(seed)
    binned = Binned(X)
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    init = math.log(prior / (1 - prior))
    F = np.full(n, init)
    loss = log_loss_from_logit(y, F)
    model = Boosted(init, [], [], [loss])
    m = max(1, int(round(subsample * n)))
    for _ in range(n_estimators):
        p = _logistic(F)
        r = y - p
        if subsample < 1.0:
            w = np.zeros(n)
            w[rng.choice(n, size=m, replace=False)] = 1.0
        else:
            w = np.ones(n)
        tree = binned.grow(r, w, max_depth, min_samples_split, None, int(rng.integers(0, 2**31 - 1)))
        leaf = binned.leaves(tree)
        num = np.bincount(leaf, weights=w * r, minlength=len(tree.value))
        den = np.bincount(leaf, weights=w * p * (1 - p), minlength=len(tree.value))
        tree.value = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
        step = tree.value[leaf]
        eta = learning_rate
        new_loss = log_loss_from_logit(y, F + eta * step)
        halvings = 0
        while new_loss > loss and halvings < MAX_HALVINGS:
            eta *= 0.5
            halvings += 1
            new_loss = log_loss_from_logit(y, F + eta * step)
        if new_loss > loss:
            eta, new_loss = 0.0, loss
        F = F + eta * step
        loss = new_loss
        model.trees.append(tree)
        model.scales.append(eta)
        model.train_loss.append(loss)
    return model


def importance_of(trees: list[Tree], n_features: int) -> np.ndarray:
    """Per-tree normalised squared-error decrease, averaged, renormalised."""
    acc = np.zeros(n_features)
    for t in trees:
        s = t.importance.sum()
        if s > 0:
            acc += t.importance / s
    total = acc.sum()
    return acc / total if total > 0 else acc

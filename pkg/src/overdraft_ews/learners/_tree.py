"""Histogram regression-tree kernels (numba).

Trees are grown on pre-binned features with a weighted squared-error
criterion. For 0/1 targets the squared-error decrease of a split is half the
weighted Gini-impurity decrease, so the same kernel serves the Gini trees
(dtree, rforest) and the boosting base learner.

Split rule: ``x <= threshold`` goes left. Ties in split search go to the
lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MAX_BINS = 255
LEAF = -1


def make_cuts(X: np.ndarray, max_bins: int = MAX_BINS) -> list[np.ndarray]:
    """Candidate thresholds per feature: midpoints between distinct values,
    thinned to quantiles when a feature has more than ``max_bins`` values."""
    cuts = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if len(u) > max_bins:
            q = np.quantile(u, np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
            u = np.unique(np.concatenate([q, u[-1:]]))
        cuts.append((u[:-1] + u[1:]) / 2.0 if len(u) > 1 else np.zeros(0))
    return cuts


def bin_features(X: np.ndarray, cuts: list[np.ndarray]) -> np.ndarray:
    Xb = np.empty(X.shape, dtype=np.uint8)
    for j, c in enumerate(cuts):
        Xb[:, j] = np.searchsorted(c, X[:, j], side="left")
    return Xb


def pad_cuts(cuts: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n_cuts = np.array([len(c) for c in cuts], dtype=np.int64)
    out = np.zeros((len(cuts), max(1, int(n_cuts.max(initial=0)))))
    for j, c in enumerate(cuts):
        out[j, : len(c)] = c
    return out, n_cuts


@njit(cache=True)
def build_tree(Xb, n_cuts, y, w, max_depth, min_samples_split, max_features, seed):
    """Grow one tree. Returns node arrays and per-feature squared-error decrease.

    feature[i] == -1 marks a leaf; bin_thr[i] is the largest bin sent left.
    """
    n, F = Xb.shape
    np.random.seed(seed)
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if w[i] > 0:
            idx[m] = i
            m += 1
    cap = 2 * max(m, 1) + 1
    if max_depth < 30:
        cap = min(cap, 2 ** (max_depth + 1) + 1)
    feature = np.full(cap, -1, dtype=np.int64)
    bin_thr = np.zeros(cap, dtype=np.int64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    weight = np.zeros(cap)
    importance = np.zeros(F)

    max_nb = 0
    for f in range(F):
        if n_cuts[f] + 1 > max_nb:
            max_nb = n_cuts[f] + 1
    hw = np.zeros(max_nb)
    hs = np.zeros(max_nb)
    hc = np.zeros(max_nb, dtype=np.int64)
    feats = np.arange(F)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        start = stack_start[sp]
        end = stack_end[sp]
        depth = stack_depth[sp]

        W = 0.0
        S = 0.0
        Q = 0.0
        for k in range(start, end):
            i = idx[k]
            W += w[i]
            S += w[i] * y[i]
            Q += w[i] * y[i] * y[i]
        value[node] = S / W if W > 0 else 0.0
        weight[node] = W
        sse = Q - S * S / W if W > 0 else 0.0
        if depth >= max_depth or end - start < min_samples_split or W <= 0 or sse <= 1e-14 * (Q + 1e-300):
            continue

        # candidate features (random subset for forests), scanned in ascending order
        if max_features < F:
            for a in range(F):
                feats[a] = a
            for a in range(max_features):
                b = a + np.random.randint(0, F - a)
                t = feats[a]
                feats[a] = feats[b]
                feats[b] = t
            cand = np.sort(feats[:max_features])
        else:
            cand = np.arange(F)

        best_gain = 0.0
        best_f = -1
        best_b = -1
        parent = S * S / W
        for f in cand:
            nb = n_cuts[f] + 1
            if nb < 2:
                continue
            for b in range(nb):
                hw[b] = 0.0
                hs[b] = 0.0
                hc[b] = 0
            for k in range(start, end):
                i = idx[k]
                b = Xb[i, f]
                hw[b] += w[i]
                hs[b] += w[i] * y[i]
                hc[b] += 1
            WL = 0.0
            SL = 0.0
            cL = 0
            cnt = end - start
            for b in range(nb - 1):
                WL += hw[b]
                SL += hs[b]
                cL += hc[b]
                if cL == 0:
                    continue
                if cL == cnt:
                    break
                WR = W - WL
                if WL <= 0 or WR <= 1e-12 * W:
                    continue
                SR = S - SL
                gain = SL * SL / WL + SR * SR / WR - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
        if best_f < 0 or best_gain <= 1e-12 * sse:
            continue

        # partition idx[start:end] in place
        lo = start
        hi = end - 1
        while lo <= hi:
            if Xb[idx[lo], best_f] <= best_b:
                lo += 1
            else:
                t = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = t
                hi -= 1
        mid = lo
        feature[node] = best_f
        bin_thr[node] = best_b
        importance[best_f] += best_gain
        l_id = n_nodes
        r_id = n_nodes + 1
        n_nodes += 2
        left[node] = l_id
        right[node] = r_id
        # push right first so the left subtree is numbered first
        stack_node[sp] = r_id
        stack_start[sp] = mid
        stack_end[sp] = end
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = l_id
        stack_start[sp] = start
        stack_end[sp] = mid
        stack_depth[sp] = depth + 1
        sp += 1

    return (
        feature[:n_nodes].copy(),
        bin_thr[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        weight[:n_nodes].copy(),
        importance,
    )


@njit(cache=True)
def apply_binned(Xb, feature, bin_thr, left, right):
    """Leaf index reached by every row of a binned matrix."""
    n = Xb.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if Xb[i, feature[node]] <= bin_thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True)
def apply_raw(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out

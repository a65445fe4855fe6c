"""Penalised logistic regression.

Objective (weights w, intercept b, standardised inputs):

    C * sum_i logloss(y_i, w.x_i + b) + penalty(w)

with penalty = 0.5 * ||w||^2 (l2) or ||w||_1 (l1). C is the inverse
regularisation strength, so small C shrinks the weights. The intercept is
never penalised.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize


def objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, C: float) -> tuple[float, np.ndarray]:
    """l2 objective and its gradient; theta = (w..., b)."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    loss = np.sum(np.logaddexp(0.0, z) - y * z)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    r = p - y
    grad = np.empty_like(theta)
    grad[:-1] = C * (X.T @ r) + w
    grad[-1] = C * r.sum()
    return float(C * loss + 0.5 * w @ w), grad


def _objective_l1(phi: np.ndarray, X: np.ndarray, y: np.ndarray, C: float) -> tuple[float, np.ndarray]:
    # w = u - v with u, v >= 0 turns the l1 term into a smooth linear one
    d = X.shape[1]
    u, v, b = phi[:d], phi[d : 2 * d], phi[-1]
    w = u - v
    z = X @ w + b
    loss = np.sum(np.logaddexp(0.0, z) - y * z)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    r = C * (p - y)
    gw = X.T @ r
    grad = np.concatenate([gw + 1.0, -gw + 1.0, [r.sum()]])
    return float(C * loss + u.sum() + v.sum()), grad


def fit_logreg(X: np.ndarray, y: np.ndarray, *, C: float, penalty: str) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    prior = np.clip(y.mean(), 1e-9, 1 - 1e-9)
    b0 = float(np.log(prior / (1 - prior)))
    opts = {"maxiter": 2000, "gtol": 1e-9}
    if penalty == "l2":
        res = minimize(objective, np.concatenate([np.zeros(d), [b0]]), args=(X, y, C), jac=True, method="L-BFGS-B", options=opts)
        return res.x[:-1].copy(), float(res.x[-1])
    if penalty == "l1":
        bounds = [(0, None)] * (2 * d) + [(None, None)]
        res = minimize(
            _objective_l1, np.concatenate([np.zeros(2 * d), [b0]]), args=(X, y, C), jac=True,
            method="L-BFGS-B", bounds=bounds, options=opts,
        )
        return res.x[:d] - res.x[d : 2 * d], float(res.x[-1])
    raise ValueError(f"unknown penalty {penalty!r}")

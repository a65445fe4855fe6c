"""Feed-forward network: three sigmoid hidden layers, dropout, logistic output.

Trained with plain mini-batch SGD (batch 256, no momentum) on the mean
logistic loss. Dropout is inverted (kept units are scaled by 1/(1-rate)) and
is switched off at inference.
"""

from __future__ import annotations

import numpy as np

N_HIDDEN_LAYERS = 3
BATCH_SIZE = 256


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(n_in: int, hidden: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights, zero biases: [W1, b1, W2, b2, W3, b3, Wo, bo]."""
    sizes = [n_in] + [hidden] * N_HIDDEN_LAYERS + [1]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        params.append(rng.uniform(-lim, lim, size=(a, b)))
        params.append(np.zeros(b))
    return params


def forward(params, X, masks=None):
    """Returns output logits and the per-layer activations needed for backprop."""
    acts = [X]
    h = X
    for layer in range(N_HIDDEN_LAYERS):
        W, b = params[2 * layer], params[2 * layer + 1]
        h = _sigmoid(h @ W + b)
        if masks is not None:
            h = h * masks[layer]
        acts.append(h)
    z = h @ params[-2] + params[-1]
    return z[:, 0], acts


def loss_and_grads(params, X, y, masks=None) -> tuple[float, list[np.ndarray]]:
    """Mean logistic loss and gradients w.r.t. every parameter array.

    ``masks`` (one per hidden layer, already scaled by 1/(1-rate)) fixes the
    dropout pattern so the function is deterministic and checkable.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    z, acts = forward(params, X, masks)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    delta = ((_sigmoid(z) - y) / n)[:, None]
    grads = [None] * len(params)
    grads[-2] = acts[-1].T @ delta
    grads[-1] = delta.sum(axis=0)
    back = delta @ params[-2].T
    for layer in range(N_HIDDEN_LAYERS - 1, -1, -1):
        h = acts[layer + 1]
        if masks is not None:
            # h = sigmoid(a) * m  =>  dh/da = sigmoid'(a) * m = h * (1 - h / m) where m > 0
            m = masks[layer]
            s = np.divide(h, m, out=np.zeros_like(h), where=m > 0)
            local = s * (1 - s) * m
        else:
            local = h * (1 - h)
        da = back * local
        grads[2 * layer] = acts[layer].T @ da
        grads[2 * layer + 1] = da.sum(axis=0)
        back = da @ params[2 * layer].T
    return loss, grads


def fit_ffnn(X, y, *, hidden_size, learning_rate, epochs, dropout, seed) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.float64)
    params = init_params(X.shape[1], hidden_size, rng)
    # start the output bias at the prior logit so small learning rates still rank sensibly
    prior = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    params[-1][:] = np.log(prior / (1 - prior))
    n = len(y)
    keep = 1.0 - dropout
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, BATCH_SIZE):
            batch = order[start : start + BATCH_SIZE]
            masks = None
            if dropout > 0:
                masks = [(rng.random((len(batch), hidden_size)) < keep) / keep for _ in range(N_HIDDEN_LAYERS)]
            _, grads = loss_and_grads(params, X[batch], y[batch], masks)
            for p, g in zip(params, grads):
                p -= learning_rate * g
    return params


def predict_ffnn(params, X) -> np.ndarray:
    z, _ = forward(params, X)
    return _sigmoid(z)

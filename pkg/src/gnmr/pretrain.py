"""Autoencoder pretraining of the initial user and item embedding tables."""
from __future__ import annotations

import logging

import numpy as np

from . import ndgrad as nd
from .interactions import InteractionTensor
from .model import random_embeddings
from .ndgrad import Tensor

log = logging.getLogger(__name__)


def multi_hot(x: InteractionTensor) -> tuple[np.ndarray, np.ndarray]:
    """User rows over K*J columns and item rows over K*I columns (column ``k*J + j``)."""
    I, J, K = x.shape
    users = np.zeros((I, K * J))
    items = np.zeros((J, K * I))
    u, j, k = x.events.T
    users[u, k * J + j] = 1.0
    items[j, k * I + u] = 1.0
    return users, items


def train_autoencoder(data: np.ndarray, hidden: int, seed: int, epochs: int = 100,
                      lr: float = 1e-2) -> tuple[np.ndarray, list[float]]:
    """Fit ``relu(x We' + be) Wd' + bd`` to ``data`` under squared error.

    Returns the encoder outputs and the per-epoch reconstruction loss (mean
    over rows of the summed squared error), measured before each update.
    """
    rng = np.random.default_rng(seed)
    n, m = data.shape
    limit = np.sqrt(6.0 / (m + hidden))
    params = {
        "We": Tensor(rng.uniform(-limit, limit, (hidden, m)), requires_grad=True),
        "be": Tensor(np.full(hidden, 0.01), requires_grad=True),
        "Wd": Tensor(rng.uniform(-limit, limit, (m, hidden)), requires_grad=True),
        "bd": Tensor(np.zeros(m), requires_grad=True),
    }
    x = Tensor(data)
    state = nd.AdamState(lr=lr, decay_rate=1.0)
    losses = []
    for _ in range(epochs):
        with nd.Tape() as tape:
            h = nd.relu(nd.add_bias(x @ nd.transpose(params["We"]), params["be"]))
            recon = nd.add_bias(h @ nd.transpose(params["Wd"]), params["bd"])
            diff = recon - x
            loss = nd.sum(diff * diff) * (1.0 / n)
        grads = tape.backward(loss)
        losses.append(loss.item())
        params = nd.adam_step(params, {k: grads[p] for k, p in params.items()}, state)
    h = np.maximum(data @ params["We"].data.T + params["be"].data, 0.0)
    return h, losses


def pretrain_init(x: InteractionTensor, d: int, seed: int, mode: str = "autoencoder",
                  epochs: int = 100, lr: float = 1e-2,
                  scale: float | None = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Initial embedding tables H0 for users (I, d) and items (J, d).

    ``mode="random"`` draws N(0, 0.01^2) entries. ``mode="autoencoder"`` uses
    the hidden layer of an autoencoder over each node's multi-behavior
    multi-hot vector; rows that are all zero (no events) fall back to random.
    Encoder outputs are multiplied by one constant per table so that the
    table's standard deviation is ``scale`` (None keeps the raw outputs).
    Raw-sum propagation is quadratic in the embedding scale per layer, so
    large initial tables overflow the first forward pass.
    """
    if d < 1:
        raise ValueError("embedding dimension must be positive")
    rng = np.random.default_rng(seed)
    fallback_u, fallback_v = random_embeddings(x.n_users, x.n_items, d, rng)
    if mode == "random":
        return fallback_u, fallback_v
    if mode != "autoencoder":
        raise ValueError(f"unknown pretraining mode {mode!r}")
    users, items = multi_hot(x)
    out = []
    for data, fallback, label, sub in ((users, fallback_u, "user", 1), (items, fallback_v, "item", 2)):
        h, losses = train_autoencoder(data, d, seed * 7919 + sub, epochs, lr)
        log.debug("%s autoencoder loss %.4f -> %.4f", label, losses[0], losses[-1])
        empty = ~data.any(axis=1)
        if scale is not None and h[~empty].std() > 0:
            h = h * (scale / h[~empty].std())
        h[empty] = fallback[empty]
        out.append(h)
    return out[0], out[1]

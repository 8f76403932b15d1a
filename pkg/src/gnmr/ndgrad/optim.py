"""Adam with per-epoch multiplicative learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 0.96
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay_rate ** self.epoch

    def end_epoch(self) -> None:
        self.epoch += 1


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """One bias-corrected Adam update. Returns new parameter tensors; inputs are untouched."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(sorted(missing))}")
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise NonFiniteError(f"non-finite gradient for {name}")

    state.step += 1
    t = state.step
    lr = state.effective_lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated: dict[str, Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = Tensor(new, requires_grad=p.requires_grad, name=p.name)
    return updated

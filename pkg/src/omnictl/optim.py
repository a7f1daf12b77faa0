"""Optimizer steps over named parameters.

Frozen parameters are never touched. AdamW keeps first/second moment state
keyed by parameter name, so state survives checkpoint round-trips as long as
names are stable.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, Parameter


def sgd_step(params, lr: float) -> None:
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p.name!r} has no gradient")
        p.data -= lr * p.grad


def poly_decay(lr0: float, step: int, total: int, floor_lr: float, power: float = 1.0) -> float:
    """Polynomial decay from lr0 to floor_lr over `total` steps."""
    frac = min(max(step, 0), total) / max(total, 1)
    return floor_lr + (lr0 - floor_lr) * (1.0 - frac) ** power


class AdamW:
    """Decoupled weight decay Adam; moments keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, list] = {}

    def step(self, params, lr: float) -> None:
        for p in params:
            if p.frozen:
                continue
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {p.name!r} has no gradient")
            m, v, t = self.state.setdefault(p.name, [np.zeros_like(p.data), np.zeros_like(p.data), 0])
            t += 1
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[p.name][2] = t


def adamw_step(params, lr: float, beta1: float, beta2: float, eps: float,
               weight_decay: float, state: dict) -> None:
    """Functional AdamW step; `state` plays the role of the optimizer object."""
    opt = AdamW(beta1, beta2, eps, weight_decay)
    opt.state = state
    opt.step(params, lr)

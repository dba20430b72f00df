"""Adam with decoupled weight decay and a linear warm-up schedule.

The first-moment decay defaults to 0.7, read from the training recipe's
"momentum" value; the second-moment decay stays at the usual 0.999.
Weight decay is applied directly to the parameters before the moment
update, so the moments track pure loss gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = ["OptimizerConfig", "lr_at", "adam_update", "Adam"]


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.001
    beta1: float = 0.7
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    batch_size: int = 16
    epochs: int = 40

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"decay rates must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def lr_at(epoch: int, cfg: OptimizerConfig) -> float:
    """Linear warm-up from base/warmup to base, then a plateau.

    With the defaults: epochs 1..5 give 0.0002, 0.0004, 0.0006, 0.0008,
    0.001 and every later epoch stays at 0.001.
    """
    if epoch < 1:
        raise ValueError(f"epoch index is 1-based, got {epoch}")
    return min(cfg.base_lr, epoch * cfg.base_lr / cfg.warmup_epochs)


def adam_update(p, g, m, v, t, cfg: OptimizerConfig, lr: float):
    """One bias-corrected step on raw arrays; returns (p, m, v) as new arrays."""
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    if p.shape != g.shape:
        raise ValueError(f"parameter {p.shape} and gradient {g.shape} shapes differ")
    p = p - lr * cfg.weight_decay * p
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return p, m, v


class Adam:
    """Moment store over a fixed list of named parameters."""

    def __init__(self, named_params, cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = 0

    def step(self, lr: float):
        """Apply one update from each parameter's accumulated gradient."""
        self.t += 1
        for name, tensor in self.params:
            g = tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            p, m, v = adam_update(tensor.data, g, self.m[name], self.v[name],
                                  self.t, self.cfg, lr)
            tensor.data = p
            self.m[name] = m
            self.v[name] = v

    def zero_grad(self):
        for _, tensor in self.params:
            tensor.zero_grad()

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def scaled_lr(base_lr, batch_size, rule="linear", reference_batch=256):
    """Learning rate for ``batch_size``: ``linear`` scales with batch/256, ``fixed`` does not."""
    if rule == "linear":
        return base_lr * batch_size / reference_batch
    if rule == "fixed":
        return base_lr
    raise ValueError(f"unknown lr scaling rule {rule!r}")


@dataclass
class AdamW:
    """Adam with decoupled weight decay, operating on a name -> Tensor dict."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, no_decay=()):
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
            grads[name] = g
        self.step_count += 1
        k = self.step_count
        bc1 = 1.0 - self.beta1 ** k
        bc2 = 1.0 - self.beta2 ** k
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            if m.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in no_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)


@dataclass
class EMA:
    """Shadow copy of parameters, ``shadow <- decay*shadow + (1-decay)*params``.

    With ``warmup`` the effective decay is ``min(decay, (1+k)/(10+k))`` at update k,
    so short runs are not dominated by the initial weights.
    """

    decay: float = 0.9999
    warmup: bool = False
    shadow: dict = field(default_factory=dict)
    updates: int = 0

    @classmethod
    def from_params(cls, params, decay=0.9999, warmup=False):
        return cls(decay, warmup, {k: p.data.copy() for k, p in params.items()})

    def current_decay(self):
        if self.warmup:
            return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        return self.decay

    def update(self, params):
        d = self.current_decay()
        for name, p in params.items():
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"EMA shape mismatch for {name!r}")
            s *= d
            s += (1.0 - d) * p.data
        self.updates += 1

    def swap_in(self, params):
        """Exchange live weights and shadow weights in place (call again to swap back)."""
        for name, p in params.items():
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"EMA shape mismatch for {name!r}")
            self.shadow[name], p.data = p.data, s

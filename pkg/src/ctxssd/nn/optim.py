"""Optimisers operating on lists of :class:`Parameter`."""
from __future__ import annotations

import numpy as np


class SGD:
    """Momentum SGD with L2 weight decay (decay added to the gradient)."""

    def __init__(self, params, lr=1e-3, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state(self, state: dict) -> None:
        for i, v in enumerate(self.velocity):
            v[...] = state[f"velocity.{i}"]


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.int64)}
        out.update({f"m.{i}": a for i, a in enumerate(self.m)})
        out.update({f"v.{i}": a for i, a in enumerate(self.v)})
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]


def step_lr(base_lr: float, step: int, total: int, milestones=(0.6, 0.8), gamma=0.1) -> float:
    """Piecewise-constant schedule dropping by ``gamma`` at fractions of the run."""
    lr = base_lr
    for frac in milestones:
        if step >= int(frac * total):
            lr *= gamma
    return lr

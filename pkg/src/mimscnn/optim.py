"""First-order optimizers over :class:`~mimscnn.tensor.Parameter` lists."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Parameter


def _check_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"parameter {p.name or p!r} has no gradient; run backward() first")


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.01):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        _check_grads(self.params)
        for p in self.params:
            p.data -= p.dtype.type(self.lr * p.lr_scale) * p.grad
            p.grad = None


class Adam:
    """Adam with bias correction; ``lr`` is scaled per parameter by ``lr_scale``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        _check_grads(self.params)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * p.lr_scale * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)
            p.grad = None


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    SGD(params, lr).step()


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update. Pass the returned state back in to continue the moment estimates."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step()
    return state

"""SGD and Adam over explicit parameter lists (float64, deterministic)."""
from __future__ import annotations

from typing import Iterable

import torch

KINDS = ("sgd", "adam")


class Optimizer:
    """Plain SGD or Adam. A step with learning_rate 0 leaves every
    parameter bit-identical (state still advances)."""

    def __init__(
        self,
        params: Iterable[torch.Tensor],
        kind: str = "adam",
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}, expected one of {KINDS}")
        if learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        self.params = [p for p in params]
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        if kind == "adam":
            self._m = [torch.zeros_like(p) for p in self.params]
            self._v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        with torch.no_grad():
            for i, p in enumerate(self.params):
                if p.grad is None:
                    continue
                g = p.grad
                if self.kind == "sgd":
                    p.sub_(self.learning_rate * g)
                else:
                    m, v = self._m[i], self._v[i]
                    m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                    v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                    m_hat = m / (1.0 - self.beta1 ** self.step_count)
                    v_hat = v / (1.0 - self.beta2 ** self.step_count)
                    p.sub_(self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon))

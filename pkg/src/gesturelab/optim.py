"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import GradError, Tensor


class Adam:
    def __init__(self, params, lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        # accepts bare tensors or the (name, tensor) pairs Module.parameters yields
        self.params = [p[1] if isinstance(p, tuple) else p for p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self) -> None:
        """Apply one update from the accumulated gradients, then clear them."""
        for p in self.params:
            if p.grad is None:
                raise GradError("adam step with a parameter that has no grad buffer")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            with np.errstate(over="ignore", invalid="ignore"):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                step = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data -= step.astype(p.data.dtype)
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError("parameter became non-finite after adam step")
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

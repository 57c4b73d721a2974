from __future__ import annotations

from typing import Sequence

import numpy as np

from efm.errors import ContractError
from efm.nn.tensor import DTYPE, Tensor


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} has no gradient")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        step_size = DTYPE(self.lr / corr1)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= DTYPE(b1)
            m += DTYPE(1.0 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1.0 - b2) * g * g
            p.data -= step_size * m / (np.sqrt(v / DTYPE(corr2)) + DTYPE(self.eps))

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array([self.step_count], dtype=DTYPE)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m.{i}"] = m
            out[f"{prefix}v.{i}"] = v
        return out

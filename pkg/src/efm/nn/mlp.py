"""Fully connected networks with tanh hidden layers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from efm.errors import DimensionError, FormatError
from efm.nn.tensor import DTYPE, Tensor


class Mlp:
    """Dense network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Weights are stored as ``(fan_in, fan_out)`` so a batch multiplies from the
    left. Hidden layers use tanh, the output layer is linear.
    """

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 0 for s in sizes) or any(s == 0 for s in sizes[1:]):
            raise DimensionError(f"invalid layer sizes {sizes}")
        self.layer_sizes = sizes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)
            self.weights.append(Tensor.parameter(w))
            self.biases.append(Tensor.parameter(np.zeros(fan_out, dtype=DTYPE)))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _check_input(self, width: int) -> None:
        if width != self.in_dim:
            raise DimensionError(
                f"layer 0 expects input width {self.in_dim}, got {width}"
            )

    def forward(self, x: Tensor) -> Tensor:
        """Taped forward pass; use for anything that will be differentiated."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x.shape[-1])
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Untaped forward pass on plain arrays. Safe to call concurrently."""
        h = np.asarray(x, dtype=DTYPE)
        self._check_input(h.shape[-1])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        return h

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}{i}.weight"] = w.data
            out[f"{prefix}{i}.bias"] = b.data
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            for name, param in ((f"{prefix}{i}.weight", w), (f"{prefix}{i}.bias", b)):
                if name not in tensors:
                    raise FormatError(f"missing tensor {name!r}", 0)
                value = np.asarray(tensors[name], dtype=DTYPE)
                if value.shape != param.shape:
                    raise DimensionError(f"{name}: expected {param.shape}, got {value.shape}")
                param.data = value.copy()
                param.zero_grad()

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_sizes = list(self.layer_sizes)
        clone.weights = [Tensor.parameter(w.data.copy()) for w in self.weights]
        clone.biases = [Tensor.parameter(b.data.copy()) for b in self.biases]
        return clone

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.parameters())

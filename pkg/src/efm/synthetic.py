"""Seeded synthetic distributions whose support bounds are known in closed form.

=====================  ======  ==============================================
family                 cond    definition
=====================  ======  ==============================================
uniform                none    x ~ U(2, 5)
point-mass             none    x = 3
bimodal-uniform        c       x|c ~ 1/2 U(c, c+1) + 1/2 U(c+3, c+4)
conditional-mixture    c       x|c ~ 1/4 U(-1-c, -1/2-c) + 3/4 U(c/2, 1+c/2)
crescent-2D            none    theta ~ U(0, pi), r ~ U(0.8, 1);
                               (z, y) = (r cos theta, r sin theta)
=====================  ======  ==============================================

Conditioning values are drawn from U(0, 1); the evaluation grid is 11 evenly
spaced points on [0, 1] for conditional families and the single point 0 for
unconditional ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from efm.errors import ConfigError
from efm.nn import DTYPE


@dataclass(frozen=True)
class Family:
    name: str
    cond_dim: int
    dim: int
    draw: Callable[[np.random.Generator, np.ndarray], np.ndarray]
    bounds: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    def sample(self, rng: np.random.Generator, n: int):
        """Return ``(x, c)``; ``c`` is ``None`` for unconditional families."""
        c = rng.random((n, 1)).astype(DTYPE) if self.cond_dim else None
        x = self.draw(rng, np.zeros((n, 1)) if c is None else c)
        return x.astype(DTYPE), c

    def condition_grid(self) -> np.ndarray:
        if self.cond_dim:
            return np.linspace(0.0, 1.0, 11, dtype=DTYPE)[:, None]
        return np.zeros((1, 1), dtype=DTYPE)

    def true_bounds(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(c, dtype=np.float64).reshape(-1)
        lo, hi = self.bounds(c)
        return np.broadcast_to(lo, c.shape).copy(), np.broadcast_to(hi, c.shape).copy()


def _uniform(rng, c):
    return rng.uniform(2.0, 5.0, size=(len(c), 1))


def _point(rng, c):
    return np.full((len(c), 1), 3.0)


def _bimodal(rng, c):
    base = rng.random((len(c), 1))
    upper = rng.random((len(c), 1)) < 0.5
    return c + base + 3.0 * upper


def _mixture(rng, c):
    n = len(c)
    low = rng.random((n, 1)) < 0.25
    u = rng.random((n, 1))
    return np.where(low, -1.0 - c + 0.5 * u, 0.5 * c + u)


def _crescent(rng, c):
    n = len(c)
    theta = rng.uniform(0.0, np.pi, size=n)
    r = rng.uniform(0.8, 1.0, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


FAMILIES: dict[str, Family] = {
    f.name: f
    for f in (
        Family("uniform", 0, 1, _uniform, lambda c: (2.0, 5.0)),
        Family("point-mass", 0, 1, _point, lambda c: (3.0, 3.0)),
        Family("bimodal-uniform", 1, 1, _bimodal, lambda c: (c, c + 4.0)),
        Family("conditional-mixture", 1, 1, _mixture, lambda c: (-1.0 - c, 1.0 + 0.5 * c)),
        Family("crescent-2D", 0, 2, _crescent, lambda c: (-1.0, 1.0)),
    )
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        valid = ", ".join(FAMILIES)
        raise ConfigError(f"unknown family {name!r}; valid names: {valid}") from None

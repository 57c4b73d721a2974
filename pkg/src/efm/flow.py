"""Conditional flow matching: simulation-free training and Euler-integrated sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from efm.errors import ContractError, DimensionError, FormatError, TrainingDivergedError
from efm.nn import DTYPE, Adam, Mlp, Tensor
from efm.nn.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_EULER_STEPS = 10

_KIND_CODES = {"uniform": 0, "gaussian": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class SourceDistribution:
    kind: str
    dim: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ContractError(f"unknown source kind {self.kind!r}")
        if self.dim <= 0:
            raise ContractError("source dimension must be positive")
        if self.kind == "uniform":
            lo = np.broadcast_to(np.asarray(self.lower, dtype=DTYPE), (self.dim,)).copy()
            hi = np.broadcast_to(np.asarray(self.upper, dtype=DTYPE), (self.dim,)).copy()
            if not np.all(lo < hi):
                raise ContractError("uniform source needs lower < upper in every dimension")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, dim: int, lower=0.0, upper=1.0) -> "SourceDistribution":
        return cls("uniform", dim, lower, upper)

    @classmethod
    def gaussian(cls, dim: int) -> "SourceDistribution":
        return cls("gaussian", dim)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            u = rng.random((n, self.dim), dtype=np.float32)
            return (self.lower + u * (self.upper - self.lower)).astype(DTYPE)
        return rng.standard_normal((n, self.dim), dtype=np.float32)

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return np.ones(len(x), dtype=bool)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


class FlowModel:
    """Vector field ``f(x_t, t, c)`` plus the source it transports from.

    The network input is the concatenation ``[x_t, t, c]``; time is a raw
    scalar channel.
    """

    def __init__(
        self,
        dim: int,
        cond_dim: int = 0,
        hidden: Sequence[int] = (64, 64),
        source: SourceDistribution | None = None,
        rng: np.random.Generator | None = None,
    ):
        if dim <= 0 or cond_dim < 0:
            raise ContractError(f"bad flow dims dim={dim} cond_dim={cond_dim}")
        self.dim = dim
        self.cond_dim = cond_dim
        self.source = source if source is not None else SourceDistribution.uniform(dim)
        if self.source.dim != dim:
            raise DimensionError(f"source dim {self.source.dim} != flow dim {dim}")
        self.net = Mlp([dim + 1 + cond_dim, *hidden, dim], rng)

    def _cond(self, c, n: int) -> np.ndarray:
        if self.cond_dim == 0:
            return np.zeros((n, 0), dtype=DTYPE)
        if c is None:
            raise DimensionError(f"flow expects conditioning of width {self.cond_dim}")
        c = np.asarray(c, dtype=DTYPE)
        if c.ndim == 1:
            c = np.broadcast_to(c, (n, c.shape[0]))
        if c.shape != (n, self.cond_dim):
            raise DimensionError(
                f"conditioning shape {c.shape} does not match (batch={n}, cond_dim={self.cond_dim})"
            )
        return c

    def _inputs(self, x: np.ndarray, t, c) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"flow state shape {x.shape} does not match dim {self.dim}")
        n = x.shape[0]
        t_col = np.broadcast_to(np.asarray(t, dtype=DTYPE).reshape(-1, 1), (n, 1))
        return np.concatenate([x, t_col, self._cond(c, n)], axis=1)

    def velocity(self, x: np.ndarray, t, c=None) -> np.ndarray:
        return self.net.predict(self._inputs(x, t, c))

    def velocity_tensor(self, x: np.ndarray, t, c=None) -> Tensor:
        return self.net.forward(Tensor(self._inputs(x, t, c)))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def copy(self) -> "FlowModel":
        clone = FlowModel.__new__(FlowModel)
        clone.dim, clone.cond_dim, clone.source = self.dim, self.cond_dim, self.source
        clone.net = self.net.copy()
        return clone

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        src = self.source
        meta = [1, self.dim, self.cond_dim, _KIND_CODES[src.kind], len(self.net.layer_sizes)]
        out = {
            f"{prefix}__flow__": np.array(meta + self.net.layer_sizes, dtype=DTYPE),
        }
        if src.kind == "uniform":
            out[f"{prefix}__source__"] = np.concatenate([src.lower, src.upper])
        out.update(self.net.state_dict(prefix + "net."))
        return out

    @classmethod
    def from_state_dict(cls, tensors: dict[str, np.ndarray], prefix: str = "") -> "FlowModel":
        key = f"{prefix}__flow__"
        if key not in tensors:
            raise FormatError(f"no flow header {key!r} in checkpoint", 0)
        meta = [int(v) for v in tensors[key]]
        _, dim, cond_dim, kind, n_layers = meta[:5]
        sizes = meta[5:5 + n_layers]
        if kind == _KIND_CODES["uniform"]:
            bounds = tensors[f"{prefix}__source__"]
            source = SourceDistribution.uniform(dim, bounds[:dim], bounds[dim:])
        else:
            source = SourceDistribution.gaussian(dim)
        model = cls(dim, cond_dim, sizes[1:-1], source)
        model.net.load_state_dict(tensors, prefix + "net.")
        return model

    def save(self, path) -> None:
        save_checkpoint(self.state_dict(), path)

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_state_dict(load_checkpoint(path))


@dataclass
class FlowBatch:
    x_src: np.ndarray
    x_dst: np.ndarray
    t: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.x_src = np.asarray(self.x_src, dtype=DTYPE)
        self.x_dst = np.asarray(self.x_dst, dtype=DTYPE)
        self.t = np.asarray(self.t, dtype=DTYPE).reshape(-1)
        if self.x_src.shape != self.x_dst.shape:
            raise DimensionError(f"x_src {self.x_src.shape} vs x_dst {self.x_dst.shape}")
        if self.t.shape[0] != self.x_src.shape[0]:
            raise DimensionError("t must have one entry per batch row")
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ContractError("t must lie in [0, 1]")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=DTYPE)
            if self.c.shape[0] != self.x_src.shape[0]:
                raise DimensionError("conditioning batch size differs from x batch size")


def flow_loss(model: FlowModel, batch: FlowBatch) -> Tensor:
    """Mean over rows of ``||f(x_t, t, c) - (x_dst - x_src)||^2``."""
    if batch.x_src.shape[1] != model.dim:
        raise DimensionError(f"batch dim {batch.x_src.shape[1]} != model dim {model.dim}")
    t = batch.t[:, None]
    x_t = (1.0 - t) * batch.x_src + t * batch.x_dst
    target = batch.x_dst - batch.x_src
    pred = model.velocity_tensor(x_t, batch.t, batch.c)
    return (pred - target).square().sum(axis=1).mean()


def make_batch(model: FlowModel, x_dst: np.ndarray, c, rng: np.random.Generator) -> FlowBatch:
    x_dst = np.asarray(x_dst, dtype=DTYPE)
    n = x_dst.shape[0]
    x_src = model.source.sample(n, rng)
    t = rng.random(n, dtype=np.float32)
    return FlowBatch(x_src, x_dst, t, c)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    log_every: int = 100
    seed: int = 0


def lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_final is None:
        return config.lr
    frac = min(step / max(config.steps, 1), 1.0)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))


class FlowTrainer:
    """Owns one model and its optimizer; ``update`` performs a single Adam step."""

    def __init__(self, model: FlowModel, lr: float, name: str = "flow"):
        self.model = model
        self.name = name
        self.opt = Adam(model.parameters(), lr=lr)

    def update(self, x_dst: np.ndarray, c, rng: np.random.Generator, lr: float | None = None) -> float:
        batch = make_batch(self.model, x_dst, c, rng)
        self.opt.zero_grad()
        loss = flow_loss(self.model, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(self.opt.step_count, value, f"{self.name} loss")
        loss.backward()
        if lr is not None:
            self.opt.lr = lr
        self.opt.step()
        return value


@dataclass
class TrainResult:
    model: FlowModel
    loss_curve: list[float] = field(default_factory=list)


Sampler = Callable[[np.random.Generator, int], "tuple[np.ndarray, np.ndarray | None]"]


def train(model: FlowModel, sampler: Sampler, config: TrainConfig) -> TrainResult:
    """Fit ``model`` to targets drawn from ``sampler(rng, n) -> (x_dst, c)``.

    The loss curve holds the mean loss of every ``log_every`` consecutive steps.
    """
    rng = np.random.default_rng(config.seed)
    trainer = FlowTrainer(model, config.lr)
    curve: list[float] = []
    window: list[float] = []
    for step in range(config.steps):
        x_dst, c = sampler(rng, config.batch_size)
        window.append(trainer.update(x_dst, c, rng, lr_at(config, step)))
        if len(window) == config.log_every or step == config.steps - 1:
            curve.append(float(np.mean(window)))
            window = []
    log.debug("trained flow: final loss %.5f", curve[-1] if curve else float("nan"))
    return TrainResult(model, curve)


def integrate(model, x0: np.ndarray, c=None, steps: int = DEFAULT_EULER_STEPS) -> np.ndarray:
    """Euler-integrate from t=0 to t=1 with ``steps`` uniform increments.

    ``model`` is anything exposing ``velocity(x, t, c)``; stubs work too.
    """
    if int(steps) != steps or steps < 1:
        raise ContractError(f"integration needs steps >= 1, got {steps}")
    x = np.array(x0, dtype=DTYPE)
    if x.ndim == 1:
        x = x[:, None]
    dim = getattr(model, "dim", x.shape[1])
    if x.shape[1] != dim:
        raise DimensionError(f"x0 width {x.shape[1]} does not match flow dim {dim}")
    dt = DTYPE(1.0 / steps)
    for i in range(steps):
        x = x + dt * np.asarray(model.velocity(x, DTYPE(i) * dt, c), dtype=DTYPE)
    return x


def sample(model: FlowModel, c, rng: np.random.Generator, steps: int = DEFAULT_EULER_STEPS, n: int | None = None) -> np.ndarray:
    """Draw ``x0`` from the model's source and transport it.

    One sample per conditioning row; for unconditional models pass ``n``.
    """
    if n is None:
        if c is None:
            raise ContractError("unconditional sampling needs n")
        n = np.asarray(c).shape[0] if np.ndim(c) == 2 else 1
    if model.cond_dim > 0:
        model._cond(c, n)
    x0 = model.source.sample(n, rng)
    return integrate(model, x0, c, steps)

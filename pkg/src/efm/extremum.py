"""Distribution bound estimation with flows from a uniform source.

In one dimension the flow never crosses itself, so the endpoints of the
uniform source map to the endpoints of the target support. Multi-dimensional
targets are split into ``z`` (the axis being optimised, modelled 1D) and the
remaining coordinates ``y`` generated conditionally on ``z``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from efm.errors import ContractError, TrainingDivergedError
from efm.flow import FlowModel, SourceDistribution, TrainConfig, integrate, lr_at, train
from efm.nn import DTYPE, Adam, Mlp, Tensor
from efm.synthetic import Family, get_family

log = logging.getLogger(__name__)

EXTREMUM_EULER_STEPS = 32


@dataclass
class ExtremumModel1D:
    flow: FlowModel
    epsilon_lo: float = 0.0
    epsilon_hi: float = 1.0
    euler_steps: int = EXTREMUM_EULER_STEPS

    def __post_init__(self):
        if self.flow.dim != 1 or self.flow.source.kind != "uniform":
            raise ContractError("extremum model needs a 1D flow with a uniform source")
        if not 0.0 <= self.epsilon_lo < self.epsilon_hi <= 1.0:
            raise ContractError("need 0 <= epsilon_lo < epsilon_hi <= 1")

    @classmethod
    def create(cls, cond_dim: int = 0, hidden=(64, 64, 64), rng=None, **kwargs) -> "ExtremumModel1D":
        flow = FlowModel(1, cond_dim, hidden, SourceDistribution.uniform(1), rng)
        return cls(flow, **kwargs)

    @property
    def cond_dim(self) -> int:
        return self.flow.cond_dim

    def query(self, epsilon, c=None) -> np.ndarray:
        """Deterministic transport of source point(s) ``epsilon``; one output per row."""
        n = 1 if c is None or np.ndim(c) < 2 else np.shape(c)[0]
        eps = np.broadcast_to(np.asarray(epsilon, dtype=DTYPE).reshape(-1, 1), (n, 1))
        return integrate(self.flow, eps, c, self.euler_steps)[:, 0]


def estimate_bounds(model: ExtremumModel1D, c=None) -> tuple[np.ndarray, np.ndarray]:
    """``(min_est, max_est)`` per conditioning row."""
    if not model.flow.net.all_finite():
        raise ContractError("extremum flow has non-finite weights; was training aborted?")
    lo = model.query(model.epsilon_lo, c)
    hi = model.query(model.epsilon_hi, c)
    return lo, hi


def train_extremum(model: ExtremumModel1D, sampler, config: TrainConfig) -> list[float]:
    return train(model.flow, sampler, config).loss_curve


def expectile_weights(u: np.ndarray, epsilon: float) -> np.ndarray:
    return np.abs(epsilon - (u < 0).astype(DTYPE)).astype(DTYPE)


def expectile_loss(pred: Tensor, target, epsilon: float) -> Tensor:
    """Mean of ``|eps - 1(u < 0)| u^2`` with ``u = target - pred``."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"expectile epsilon must be in (0, 1), got {epsilon}")
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} differ")
    u = Tensor(target) - pred
    return (u.square() * expectile_weights(u.data, epsilon)).mean()


@dataclass
class ExpectileModel:
    net: Mlp
    epsilon: float

    @classmethod
    def create(cls, cond_dim: int, epsilon: float, hidden=(64, 64, 64), rng=None) -> "ExpectileModel":
        if not 0.0 < epsilon < 1.0:
            raise ContractError(f"expectile epsilon must be in (0, 1), got {epsilon}")
        return cls(Mlp([cond_dim, *hidden, 1], rng), epsilon)

    def _inputs(self, c, n: int) -> np.ndarray:
        if self.net.in_dim == 0:
            return np.zeros((n, 0), dtype=DTYPE)
        return np.asarray(c, dtype=DTYPE).reshape(n, self.net.in_dim)

    def predict(self, c=None, n: int | None = None) -> np.ndarray:
        if n is None:
            n = 1 if c is None else np.shape(c)[0]
        return self.net.predict(self._inputs(c, n))[:, 0]


def train_expectile(model: ExpectileModel, sampler, config: TrainConfig) -> list[float]:
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.net.parameters(), lr=config.lr)
    curve, window = [], []
    for step in range(config.steps):
        x, c = sampler(rng, config.batch_size)
        n = len(x)
        opt.zero_grad()
        pred = model.net.forward(Tensor(model._inputs(c, n)))
        loss = expectile_loss(pred, np.asarray(x, dtype=DTYPE).reshape(n, 1), model.epsilon)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value, "expectile loss")
        loss.backward()
        opt.lr = lr_at(config, step)
        opt.step()
        window.append(value)
        if len(window) == config.log_every or step == config.steps - 1:
            curve.append(float(np.mean(window)))
            window = []
    return curve


@dataclass
class DecomposedModel:
    """``f1`` models ``z`` (optionally given external ``c``); ``f2`` models ``y | z, c``."""

    f1: ExtremumModel1D
    f2: FlowModel

    def __post_init__(self):
        if self.f2.cond_dim != 1 + self.f1.cond_dim:
            raise ContractError("f2 must be conditioned on z plus f1's conditioning")

    @classmethod
    def create(cls, dim: int, cond_dim: int = 0, hidden=(64, 64, 64), rng=None) -> "DecomposedModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        f1 = ExtremumModel1D.create(cond_dim, hidden, rng)
        f2 = FlowModel(dim - 1, 1 + cond_dim, hidden, SourceDistribution.uniform(dim - 1), rng)
        return cls(f1, f2)


def train_decomposed(model: DecomposedModel, sampler, config: TrainConfig) -> tuple[list[float], list[float]]:
    """``sampler(rng, n) -> (x, c)`` with ``x[:, 0]`` the optimised axis."""

    def z_sampler(rng, n):
        x, c = sampler(rng, n)
        return x[:, :1], c

    def y_sampler(rng, n):
        x, c = sampler(rng, n)
        cond = x[:, :1] if c is None else np.concatenate([x[:, :1], c], axis=1)
        return x[:, 1:], cond

    curve1 = train(model.f1.flow, z_sampler, config).loss_curve
    cfg2 = TrainConfig(**{**config.__dict__, "seed": config.seed + 1})
    curve2 = train(model.f2, y_sampler, cfg2).loss_curve
    return curve1, curve2


def estimate_extremum_nd(
    model: DecomposedModel,
    direction: str,
    n_samples: int,
    rng: np.random.Generator,
    c=None,
    steps: int | None = None,
) -> np.ndarray:
    """``n_samples`` joint points ``(z~, y~)`` with ``z~`` at the min or max of ``z``."""
    if direction not in ("min", "max"):
        raise ContractError(f"direction must be 'min' or 'max', got {direction!r}")
    eps = model.f1.epsilon_lo if direction == "min" else model.f1.epsilon_hi
    cond = None if c is None else np.broadcast_to(np.asarray(c, dtype=DTYPE).reshape(1, -1), (n_samples, model.f1.cond_dim))
    z = model.f1.query(eps, None if cond is None else cond[:1])
    z_col = np.full((n_samples, 1), z[0], dtype=DTYPE)
    cond2 = z_col if cond is None else np.concatenate([z_col, cond], axis=1)
    x0 = model.f2.source.sample(n_samples, rng)
    y = integrate(model.f2, x0, cond2, steps or model.f1.euler_steps)
    return np.concatenate([z_col, y], axis=1)


def single_model_extremum(flow: FlowModel, direction: str, n_samples: int, rng, steps: int = EXTREMUM_EULER_STEPS) -> np.ndarray:
    """Baseline: one joint flow from U(0,1)^n, source pinned to the z-edge."""
    x0 = flow.source.sample(n_samples, rng)
    x0[:, 0] = flow.source.lower[0] if direction == "min" else flow.source.upper[0]
    return integrate(flow, x0, None, steps)


@dataclass
class CompareConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=6000, lr=2e-3, lr_final=1e-4))
    hidden: tuple[int, ...] = (64, 64, 64)
    expectile_lo: float = 0.01
    expectile_hi: float = 0.99
    seed: int = 0


REPORT_HEADER = ["family", "condition", "true_min", "true_max", "flow_min", "flow_max", "expectile_min", "expectile_max"]


def _family_sampler(family: Family, axis: int = 0):
    def sampler(rng, n):
        x, c = family.sample(rng, n)
        return x[:, axis:axis + 1], c

    return sampler


def compare_methods(family_name: str, report_path=None, config: CompareConfig | None = None) -> list[dict]:
    """Train bound estimators of both kinds on identical draws and tabulate them.

    For the 2D crescent the compared quantity is the ``z`` coordinate. Returns
    one dict per grid condition; the CSV (if ``report_path``) holds
    ``REPORT_HEADER`` columns with 6 significant digits.
    """
    family = get_family(family_name)
    config = config or CompareConfig()
    sampler = _family_sampler(family)
    rng = np.random.default_rng(config.seed)
    flow = ExtremumModel1D.create(family.cond_dim, config.hidden, rng)
    lo_net = ExpectileModel.create(family.cond_dim, config.expectile_lo, config.hidden, np.random.default_rng(config.seed + 1))
    hi_net = ExpectileModel.create(family.cond_dim, config.expectile_hi, config.hidden, np.random.default_rng(config.seed + 2))
    # identical data stream for all three: same sampler, same seed
    train(flow.flow, sampler, config.train)
    train_expectile(lo_net, sampler, config.train)
    train_expectile(hi_net, sampler, config.train)

    grid = family.condition_grid()
    cond = grid if family.cond_dim else None
    true_lo, true_hi = family.true_bounds(grid)
    flow_lo, flow_hi = estimate_bounds(flow, cond)
    if cond is None:
        flow_lo = np.repeat(flow_lo, len(grid))
        flow_hi = np.repeat(flow_hi, len(grid))
    exp_lo = lo_net.predict(cond, len(grid))
    exp_hi = hi_net.predict(cond, len(grid))

    rows = []
    for i, c in enumerate(grid[:, 0]):
        rows.append({
            "family": family.name,
            "condition": float(c),
            "true_min": float(true_lo[i]),
            "true_max": float(true_hi[i]),
            "flow_min": float(flow_lo[i]),
            "flow_max": float(flow_hi[i]),
            "expectile_min": float(exp_lo[i]),
            "expectile_max": float(exp_hi[i]),
        })
    if report_path is not None:
        write_report(rows, report_path)
    return rows


def bound_errors(rows: list[dict]) -> dict[str, float]:
    """Mean absolute bound error of each method over the grid (both ends pooled)."""
    flow = [abs(r["flow_min"] - r["true_min"]) for r in rows] + [abs(r["flow_max"] - r["true_max"]) for r in rows]
    expectile = [abs(r["expectile_min"] - r["true_min"]) for r in rows] + [abs(r["expectile_max"] - r["true_max"]) for r in rows]
    return {"flow": float(np.mean(flow)), "expectile": float(np.mean(expectile))}


def write_report(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in rows:
            writer.writerow([r["family"]] + [f"{r[k]:.6g}" for k in REPORT_HEADER[1:]])

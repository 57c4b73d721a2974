"""Flow-matching goal-conditioned agents built from critic, planner, actor and world flows.

=====  ==========================================  ===============================================
kind   trained components                          inference
=====  ==========================================  ===============================================
GC     actor(tau_a | o, g)                         actor
AC     critic(d | o, g), actor(tau_a | o, g, d)    d~ = critic(0 | o, g); actor(o, g, d~)
PC     critic, planner(tau_o | o, g, d),           d~; tau_o~ = planner(o, g, d~); actor(o, tau_o~)
       actor(tau_a | o, tau_o)
PS     critic, planner(tau_o | o),                 n plans, keep argmin critic(0 | tau_o[-1], g),
       actor(tau_a | o, tau_o)                     then actor(o, tau_o)
AS     critic, actor(tau_a | o),                   n action windows, roll each through the world
       world(tau_o | o, tau_a)                     model, keep argmin critic(0 | tau_o[-1], g)
=====  ==========================================  ===============================================

All learning happens in normalised space: observations and actions use the
store's mean/scale, distances are divided by ``L_g``. Observation windows are
modelled as offsets from the current observation (row 0 is then exactly 0),
which makes short-horizon planner and world predictions far easier to fit. The critic is a pair of
independent 1D extremum flows; their estimates are combined with ``max``
(the pessimistic, larger distance).

With ``use_rl`` half of every critic (and goal-conditioned generator) batch
is relabelled with an unrelated goal ``g'`` and the bootstrapped distance
``d + critic(eps_g | g, g')``, ``eps_g ~ U(0, r_g)``, read from a frozen copy
of the critics that is re-synchronised every ``target_sync`` steps.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from efm.dataset import EpisodeStore, SamplerConfig, TupleBatch, sample_batch, sample_unrelated_goals
from efm.envs.maze import EnvState, MazeSpec, step as env_step, success as env_success
from efm.envs.pairs import EvalPair
from efm.errors import ConfigError, ContractError, DimensionError, FormatError
from efm.flow import FlowModel, FlowTrainer, SourceDistribution, TrainConfig, integrate, lr_at
from efm.nn import DTYPE
from efm.nn.checkpoint import decode_text, encode_text, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

KINDS = ("GC", "AC", "PC", "PS", "AS")
COMPONENTS = {
    "GC": ("actor",),
    "AC": ("critic", "actor"),
    "PC": ("critic", "planner", "actor"),
    "PS": ("critic", "planner", "actor"),
    "AS": ("critic", "actor", "world"),
}
N_TWINS = 2


@dataclass
class AgentConfig:
    kind: str = "AC"
    use_rl: bool = False
    r_g: float = 0.2
    n_candidates: int = 32
    euler_steps: int = 10
    critic_euler_steps: int = 32
    target_euler_steps: int = 10
    L_o: int = 8
    S_o: int = 4
    L_a: int = 8
    S_a: int = 2
    L_g: int = 400
    hidden: tuple[int, ...] = (256, 256, 256)
    critic_hidden: tuple[int, ...] = (256, 256, 256)
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float | None = 1e-4
    target_sync: int = 500
    aug_fraction: float = 0.5
    clip_distance: bool = False
    replan_interval: int | None = None
    log_every: int = 100

    def __post_init__(self):
        self.kind = str(self.kind).upper().removeprefix("FM-")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown agent kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not 0.0 <= self.r_g <= 1.0:
            raise ConfigError(f"r_g must lie in [0, 1], got {self.r_g}")
        if self.kind in ("PS", "AS") and self.n_candidates < 2:
            raise ConfigError("rejection-sampling agents need n_candidates >= 2")
        if self.use_rl and self.kind == "GC":
            raise ConfigError("FM-GC has no critic, so it has no use-RL variant")
        if not 0.0 < self.aug_fraction < 1.0:
            raise ConfigError("aug_fraction must lie in (0, 1)")
        for name in ("euler_steps", "critic_euler_steps", "target_euler_steps", "steps", "batch_size", "target_sync", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        _ = self.sampler  # validates the window sizes

    @property
    def sampler(self) -> SamplerConfig:
        try:
            return SamplerConfig(self.L_o, self.S_o, self.L_a, self.S_a, self.L_g)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def replan_every(self) -> int:
        return self.replan_interval or max(1, self.L_a * self.S_a // 2)

    @property
    def variant(self) -> str:
        return "use-RL" if self.use_rl else "no-RL"

    @property
    def name(self) -> str:
        return f"FM-{self.kind}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["critic_hidden"] = list(self.critic_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Agent:
    config: AgentConfig
    dim_o: int
    dim_a: int
    stats: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    action_bound: float
    critics: list[FlowModel] | None = None
    actor: FlowModel | None = None
    planner: FlowModel | None = None
    world: FlowModel | None = None

    # normalisation helpers
    def norm_obs(self, obs) -> np.ndarray:
        return ((np.asarray(obs, dtype=DTYPE) - self.stats[0]) / self.stats[1]).astype(DTYPE)

    def denorm_obs(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=DTYPE) * self.stats[1] + self.stats[0]).astype(DTYPE)

    def norm_act(self, act) -> np.ndarray:
        return ((np.asarray(act, dtype=DTYPE) - self.stats[2]) / self.stats[3]).astype(DTYPE)

    def denorm_act(self, act) -> np.ndarray:
        return (np.asarray(act, dtype=DTYPE) * self.stats[3] + self.stats[2]).astype(DTYPE)

    def require(self, component: str):
        value = getattr(self, "critics" if component == "critic" else component)
        if value is None:
            raise ContractError(f"{self.config.name} agent has no trained {component}")
        return value

    def components(self) -> dict[str, FlowModel]:
        out = {}
        if self.critics is not None:
            for k, c in enumerate(self.critics):
                out[f"critic.{k}"] = c
        for name in ("actor", "planner", "world"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out


# ---------------------------------------------------------------- construction

def _cond_dims(kind: str, dim_o: int, dim_a: int, cfg: AgentConfig) -> dict[str, tuple[int, int]]:
    """``component -> (output dim, conditioning dim)``."""
    to, ta = cfg.L_o * dim_o, cfg.L_a * dim_a
    actor_cond = {
        "GC": 2 * dim_o,
        "AC": 2 * dim_o + 1,
        "PC": dim_o + to,
        "PS": dim_o + to,
        "AS": dim_o,
    }[kind]
    dims = {"actor": (ta, actor_cond)}
    if kind in ("AC", "PC", "PS", "AS"):
        dims["critic"] = (1, 2 * dim_o)
    if kind == "PC":
        dims["planner"] = (to, 2 * dim_o + 1)
    if kind == "PS":
        dims["planner"] = (to, dim_o)
    if kind == "AS":
        dims["world"] = (to, dim_o + ta)
    return dims


def init_agent(config: AgentConfig, store: EpisodeStore, seed: int = 0) -> Agent:
    """Agent with randomly initialised components sized for ``store``."""
    rng = np.random.default_rng([seed, 1])
    if store.total_steps == 0:
        raise ContractError("cannot build an agent from an empty store")
    bound = float(np.max(np.linalg.norm(store.act_all, axis=1)))
    agent = Agent(config, store.dim_o, store.dim_a, tuple(np.array(s, dtype=DTYPE) for s in store.stats), bound)
    for name, (out, cond) in _cond_dims(config.kind, store.dim_o, store.dim_a, config).items():
        if name == "critic":
            agent.critics = [
                FlowModel(1, cond, config.critic_hidden, SourceDistribution.uniform(1), rng) for _ in range(N_TWINS)
            ]
        else:
            setattr(agent, name, FlowModel(out, cond, config.hidden, SourceDistribution.gaussian(out), rng))
    return agent


# ---------------------------------------------------------------- critic queries

def critic_values(critics, epsilon, o_n: np.ndarray, g_n: np.ndarray, steps: int) -> np.ndarray:
    """Per-twin normalised distance estimates, shape ``(n_twins, n)``."""
    o_n = np.atleast_2d(np.asarray(o_n, dtype=DTYPE))
    g_n = np.atleast_2d(np.asarray(g_n, dtype=DTYPE))
    n = len(o_n)
    x0 = np.broadcast_to(np.asarray(epsilon, dtype=DTYPE).reshape(-1, 1), (n, 1))
    cond = np.concatenate([o_n, g_n], axis=1)
    return np.stack([integrate(c, x0, cond, steps)[:, 0] for c in critics])


def critic_distance(critics, epsilon, o_n, g_n, steps: int) -> np.ndarray:
    """Twins combined pessimistically (larger distance), clamped at 0."""
    return np.maximum(critic_values(critics, epsilon, o_n, g_n, steps).max(axis=0), 0.0)


# ---------------------------------------------------------------- training

@dataclass
class NormBatch:
    o: np.ndarray
    tau_o: np.ndarray  # flattened (n, L_o * dim_o) offsets from o
    tau_a: np.ndarray  # flattened (n, L_a * dim_a)
    d: np.ndarray  # (n, 1), normalised by L_g
    g: np.ndarray

    @classmethod
    def concat(cls, a: "NormBatch", b: "NormBatch") -> "NormBatch":
        return cls(*(np.concatenate([x, y]) for x, y in zip(
            (a.o, a.tau_o, a.tau_a, a.d, a.g), (b.o, b.tau_o, b.tau_a, b.d, b.g))))


def normalise_batch(agent: Agent, b: TupleBatch) -> NormBatch:
    n = len(b)
    o = agent.norm_obs(b.o)
    return NormBatch(
        o=o,
        tau_o=(agent.norm_obs(b.tau_o) - o[:, None, :]).reshape(n, -1),
        tau_a=agent.norm_act(b.tau_a).reshape(n, -1),
        d=(b.d.astype(DTYPE) / DTYPE(agent.config.L_g)).reshape(n, 1),
        g=agent.norm_obs(b.g),
    )


def augment(d_n: np.ndarray, bootstrap: np.ndarray, clip: bool = False) -> tuple[np.ndarray, int]:
    """``d + critic(eps_g | g, g')`` with negative critic outputs clamped to 0.

    Returns the new distances and how many critic outputs were clamped.
    """
    bootstrap = np.asarray(bootstrap, dtype=DTYPE).reshape(-1, 1)
    clamped = int((bootstrap < 0).sum())
    out = np.asarray(d_n, dtype=DTYPE).reshape(-1, 1) + np.maximum(bootstrap, 0.0)
    if clip:
        out = np.minimum(out, 1.0)
    return out.astype(DTYPE), clamped


@dataclass
class TrainMetrics:
    rows: list[dict] = field(default_factory=list)
    clamped: int = 0
    augmented: int = 0
    steps: int = 0

    def curve(self, component: str) -> list[float]:
        return [r[component] for r in self.rows if component in r]


def _draw(agent: Agent, store: EpisodeStore, rng, n: int, frozen, metrics: TrainMetrics | None) -> NormBatch:
    cfg = agent.config
    if frozen is None:
        return normalise_batch(agent, sample_batch(store, cfg.sampler, rng, n))
    n_aug = int(round(n * cfg.aug_fraction))
    base = normalise_batch(agent, sample_batch(store, cfg.sampler, rng, n - n_aug))
    extra = normalise_batch(agent, sample_batch(store, cfg.sampler, rng, n_aug))
    g_new = agent.norm_obs(sample_unrelated_goals(store, rng, n_aug))
    eps = rng.uniform(0.0, cfg.r_g, size=n_aug).astype(DTYPE)
    raw = critic_values(frozen, eps, extra.g, g_new, cfg.target_euler_steps).max(axis=0)
    d_aug, clamped = augment(extra.d, raw, cfg.clip_distance)
    if metrics is not None:
        metrics.clamped += clamped
        metrics.augmented += n_aug
    # original tau_o / tau_a are kept, only d and g are replaced
    extra = NormBatch(extra.o, extra.tau_o, extra.tau_a, d_aug, g_new)
    return NormBatch.concat(base, extra)


def _conditioning(kind: str, component: str, b: NormBatch) -> np.ndarray:
    if component == "critic":
        return np.concatenate([b.o, b.g], axis=1)
    if component == "planner":
        return np.concatenate([b.o, b.g, b.d], axis=1) if kind == "PC" else b.o
    if component == "world":
        return np.concatenate([b.o, b.tau_a], axis=1)
    return {
        "GC": lambda: np.concatenate([b.o, b.g], axis=1),
        "AC": lambda: np.concatenate([b.o, b.g, b.d], axis=1),
        "PC": lambda: np.concatenate([b.o, b.tau_o], axis=1),
        "PS": lambda: np.concatenate([b.o, b.tau_o], axis=1),
        "AS": lambda: b.o,
    }[kind]()


def _target(component: str, b: NormBatch) -> np.ndarray:
    return {"critic": b.d, "actor": b.tau_a, "planner": b.tau_o, "world": b.tau_o}[component]


def _check_store(config: AgentConfig, store: EpisodeStore, agent: Agent | None = None) -> None:
    if store.total_steps == 0:
        raise ContractError("cannot train on an empty store")
    if agent is not None and (store.dim_o, store.dim_a) != (agent.dim_o, agent.dim_a):
        raise DimensionError(
            f"store dims (obs {store.dim_o}, act {store.dim_a}) do not match agent dims "
            f"(obs {agent.dim_o}, act {agent.dim_a})"
        )


def train_agent(
    config: AgentConfig,
    store: EpisodeStore,
    seed: int = 0,
    callback: Callable[[int, Agent, TrainMetrics], None] | None = None,
    callback_every: int = 0,
    agent: Agent | None = None,
) -> tuple[Agent, TrainMetrics]:
    """Train every component of the configured agent; deterministic per seed."""
    _check_store(config, store, agent)
    agent = agent or init_agent(config, store, seed)
    cfg = agent.config = config
    metrics = TrainMetrics()
    schedule = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, lr_final=cfg.lr_final)
    twin_rngs = [np.random.default_rng([seed, 10 + k]) for k in range(N_TWINS)]
    main_rng = np.random.default_rng([seed, 20])
    gen_rng = np.random.default_rng([seed, 30])

    critic_trainers = [FlowTrainer(c, cfg.lr, f"critic.{k}") for k, c in enumerate(agent.critics or [])]
    others = {name: FlowTrainer(m, cfg.lr, name) for name, m in agent.components().items() if not name.startswith("critic")}
    frozen = None
    window: dict[str, list[float]] = {}

    for it in range(cfg.steps):
        lr = lr_at(schedule, it)
        if cfg.use_rl and it % cfg.target_sync == 0 and it > 0:
            frozen = [c.copy() for c in agent.critics]
        batches = []
        for k, trainer in enumerate(critic_trainers):
            b = _draw(agent, store, twin_rngs[k], cfg.batch_size, frozen, metrics)
            batches.append(b)
            loss = trainer.update(b.d, _conditioning(cfg.kind, "critic", b), twin_rngs[k], lr)
            window.setdefault(f"critic.{k}", []).append(loss)
        shared = batches[0] if batches else _draw(agent, store, main_rng, cfg.batch_size, None, None)
        for name, trainer in others.items():
            loss = trainer.update(_target(name, shared), _conditioning(cfg.kind, name, shared), gen_rng, lr)
            window.setdefault(name, []).append(loss)
        if (it + 1) % cfg.log_every == 0 or it == cfg.steps - 1:
            row = {"step": it + 1}
            row.update({k: float(np.mean(v)) for k, v in window.items()})
            metrics.rows.append(row)
            window = {}
        metrics.steps = it + 1
        if callback is not None and callback_every and (it + 1) % callback_every == 0:
            callback(it + 1, agent, metrics)
    if metrics.clamped:
        log.info("%s: clamped %d negative critic outputs", cfg.name, metrics.clamped)
    return agent, metrics


@dataclass
class World:
    """Dynamics flow ``tau_o | o, tau_a`` together with its normalisation."""

    flow: FlowModel
    agent: Agent

    def predict(self, o, tau_a, rng: np.random.Generator) -> np.ndarray:
        """Observation windows ``(n, L_o, dim_o)`` for rows of ``o`` and ``(n, L_a, dim_a)`` actions."""
        cfg = self.agent.config
        o_n = self.agent.norm_obs(np.atleast_2d(o))
        n = len(o_n)
        a_n = self.agent.norm_act(np.asarray(tau_a).reshape(n, cfg.L_a, -1)).reshape(n, -1)
        x0 = self.flow.source.sample(n, rng)
        out = integrate(self.flow, x0, np.concatenate([o_n, a_n], axis=1), cfg.euler_steps)
        return self.agent.denorm_obs(out.reshape(n, cfg.L_o, -1) + o_n[:, None, :])


def train_world(config: AgentConfig, store: EpisodeStore, seed: int = 0) -> World:
    """Stand-alone world model (the FM-AS dynamics component)."""
    _check_store(config, store)
    cfg = AgentConfig(**{**config.to_dict(), "kind": "AS", "use_rl": False})
    base = init_agent(cfg, store, seed)
    base.critics, base.actor = None, None
    trainer = FlowTrainer(base.world, cfg.lr, "world")
    schedule = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, lr_final=cfg.lr_final)
    rng = np.random.default_rng([seed, 40])
    for it in range(cfg.steps):
        b = normalise_batch(base, sample_batch(store, cfg.sampler, rng, cfg.batch_size))
        trainer.update(b.tau_o, _conditioning("AS", "world", b), rng, lr_at(schedule, it))
    return World(base.world, base)


# ---------------------------------------------------------------- inference

def _clamp_rows(actions: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(actions, axis=-1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, 1e-12))
    return (actions * scale).astype(DTYPE)


@dataclass
class InferenceInfo:
    distance: np.ndarray | None = None  # normalised d~ per row
    plans: np.ndarray | None = None  # (n, L_o, dim_o) chosen observation plans (denormalised)
    scores: np.ndarray | None = None  # (n, n_candidates) critic scores
    chosen: np.ndarray | None = None  # (n,) selected candidate index


def infer_actions(agent: Agent, obs, goals, rng: np.random.Generator, n_candidates: int | None = None):
    """Batched inference: rows of ``obs`` / ``goals`` -> ``(n, L_a, dim_a)`` action windows.

    Returns ``(actions, info)``; actions are denormalised and clamped to the
    largest action norm present in the training data.
    """
    cfg = agent.config
    kind = cfg.kind
    obs = np.atleast_2d(np.asarray(obs, dtype=DTYPE))
    goals = np.atleast_2d(np.asarray(goals, dtype=DTYPE))
    if obs.shape != goals.shape or obs.shape[1] != agent.dim_o:
        raise DimensionError(f"obs {obs.shape} / goals {goals.shape} do not match dim_o {agent.dim_o}")
    n = len(obs)
    o_n, g_n = agent.norm_obs(obs), agent.norm_obs(goals)
    steps = cfg.euler_steps
    info = InferenceInfo()

    def gen(model: FlowModel, cond: np.ndarray) -> np.ndarray:
        return integrate(model, model.source.sample(len(cond), rng), cond, steps)

    actor = agent.require("actor")
    if kind == "GC":
        tau_a = gen(actor, np.concatenate([o_n, g_n], axis=1))
    elif kind == "AC":
        d = critic_distance(agent.require("critic"), 0.0, o_n, g_n, cfg.critic_euler_steps)[:, None]
        info.distance = d[:, 0]
        tau_a = gen(actor, np.concatenate([o_n, g_n, d], axis=1))
    elif kind == "PC":
        d = critic_distance(agent.require("critic"), 0.0, o_n, g_n, cfg.critic_euler_steps)[:, None]
        info.distance = d[:, 0]
        plan = gen(agent.require("planner"), np.concatenate([o_n, g_n, d], axis=1))
        info.plans = agent.denorm_obs(plan.reshape(n, cfg.L_o, agent.dim_o) + o_n[:, None, :])
        tau_a = gen(actor, np.concatenate([o_n, plan], axis=1))
    else:
        k = cfg.n_candidates if n_candidates is None else int(n_candidates)
        if k < 1:
            raise ContractError("n_candidates must be >= 1")
        critics = agent.require("critic")
        o_rep = np.repeat(o_n, k, axis=0)
        g_rep = np.repeat(g_n, k, axis=0)
        if kind == "PS":
            plans = gen(agent.require("planner"), o_rep)
        else:
            cand_actions = gen(actor, o_rep)
            plans = gen(agent.require("world"), np.concatenate([o_rep, cand_actions], axis=1))
        last = plans.reshape(n * k, cfg.L_o, agent.dim_o)[:, -1] + o_rep
        scores = critic_distance(critics, 0.0, last, g_rep, cfg.critic_euler_steps).reshape(n, k)
        chosen = np.argmin(scores, axis=1)  # first minimum wins ties
        pick = np.arange(n) * k + chosen
        info.scores, info.chosen = scores, chosen
        info.plans = agent.denorm_obs(plans[pick].reshape(n, cfg.L_o, agent.dim_o) + o_n[:, None, :])
        if kind == "PS":
            tau_a = gen(actor, np.concatenate([o_n, plans[pick]], axis=1))
        else:
            tau_a = cand_actions[pick]
    actions = agent.denorm_act(tau_a.reshape(n, cfg.L_a, agent.dim_a))
    return _clamp_rows(actions, agent.action_bound), info


def infer_action(agent: Agent, o, g, rng: np.random.Generator | None = None, n_candidates: int | None = None) -> np.ndarray:
    """Single observation/goal -> ``(L_a, dim_a)`` action window."""
    rng = rng if rng is not None else np.random.default_rng(0)
    actions, _ = infer_actions(agent, np.asarray(o)[None], np.asarray(g)[None], rng, n_candidates)
    return actions[0]


def interpolate_action(window: np.ndarray, offset: int, stride: int) -> np.ndarray:
    """Action ``offset`` steps into a window whose rows are ``stride`` steps apart."""
    j, rem = divmod(int(offset), int(stride))
    j = min(j, len(window) - 1)
    nxt = min(j + 1, len(window) - 1)
    frac = rem / stride
    return (1.0 - frac) * window[j] + frac * window[nxt]


# ---------------------------------------------------------------- evaluation

EVAL_HEADER = ["agent", "variant", "dataset", "pair_id", "run", "success", "steps_to_success"]


@dataclass
class EvalResult:
    rows: list[dict]  # pair_id, run, success, steps_to_success (-1 when not reached)
    n_pairs: int
    n_runs: int

    def pair_rates(self) -> dict[int, float]:
        out: dict[int, list[int]] = {}
        for r in self.rows:
            out.setdefault(r["pair_id"], []).append(r["success"])
        return {k: float(np.mean(v)) for k, v in out.items()}

    @property
    def mean_rate(self) -> float:
        return float(np.mean([r["success"] for r in self.rows])) if self.rows else 0.0

    def table(self) -> list[dict]:
        """One row per pair plus a final ``mean`` row."""
        rates = self.pair_rates()
        out = [{"pair_id": k, "success_rate": v} for k, v in sorted(rates.items())]
        out.append({"pair_id": "mean", "success_rate": self.mean_rate})
        return out


def evaluate(
    agent: Agent,
    spec: MazeSpec,
    pairs: list[EvalPair],
    n_runs: int = 4,
    horizon: int = 400,
    seed: int = 0,
) -> EvalResult:
    """Closed-loop rollouts of every (pair, run), replanning every ``replan_every`` steps."""
    if horizon <= 0:
        raise ContractError(f"horizon must be positive, got {horizon}")
    if n_runs < 1:
        raise ContractError("n_runs must be >= 1")
    cfg = agent.config
    rng = np.random.default_rng([seed, 50])
    jobs = [(p, r) for p in pairs for r in range(n_runs)]
    states = [EnvState.from_observation(p.start) for p, _ in jobs]
    goals = np.array([p.goal for p, _ in jobs], dtype=DTYPE)
    reached = np.full(len(jobs), -1, dtype=np.int64)
    for i, s in enumerate(states):
        if env_success(s, goals[i], spec):
            reached[i] = 0
    windows = None
    active = np.flatnonzero(reached < 0)
    for t in range(horizon):
        active = np.flatnonzero(reached < 0)
        if len(active) == 0:
            break
        offset = t % cfg.replan_every
        if offset == 0:
            obs = np.array([states[i].observation() for i in active])
            acts, _ = infer_actions(agent, obs, goals[active], rng)
            windows = dict(zip(active.tolist(), acts))
        for i in active:
            a = interpolate_action(windows[i], offset, cfg.S_a)
            states[i] = EnvState.from_observation(env_step(states[i], a, spec).observation())
            if env_success(states[i], goals[i], spec):
                reached[i] = t + 1
    rows = [
        {"pair_id": p.pair_id, "run": r, "success": int(reached[i] >= 0), "steps_to_success": int(reached[i])}
        for i, (p, r) in enumerate(jobs)
    ]
    return EvalResult(rows, len(pairs), n_runs)


def eval_csv_rows(result: EvalResult, agent_name: str, variant: str, dataset: str) -> list[list]:
    return [[agent_name, variant, dataset, r["pair_id"], r["run"], r["success"], r["steps_to_success"]] for r in result.rows]


# ---------------------------------------------------------------- persistence

def agent_state(agent: Agent) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, model in agent.components().items():
        tensors.update(model.state_dict(name + "."))
    meta = {"config": agent.config.to_dict(), "dim_o": agent.dim_o, "dim_a": agent.dim_a, "action_bound": agent.action_bound}
    tensors["agent.meta"] = encode_text(json.dumps(meta, sort_keys=True))
    for key, value in zip(("obs_mean", "obs_scale", "act_mean", "act_scale"), agent.stats):
        tensors[f"agent.{key}"] = np.asarray(value, dtype=DTYPE)
    return tensors


def agent_from_state(tensors: dict[str, np.ndarray]) -> Agent:
    if "agent.meta" not in tensors:
        raise FormatError("checkpoint has no agent.meta record", 0)
    meta = json.loads(decode_text(tensors["agent.meta"]))
    config = AgentConfig.from_dict(meta["config"])
    stats = tuple(tensors[f"agent.{k}"] for k in ("obs_mean", "obs_scale", "act_mean", "act_scale"))
    agent = Agent(config, int(meta["dim_o"]), int(meta["dim_a"]), stats, float(meta["action_bound"]))
    if "critic.0.__flow__" in tensors:
        agent.critics = [FlowModel.from_state_dict(tensors, f"critic.{k}.") for k in range(N_TWINS)]
    for name in ("actor", "planner", "world"):
        if f"{name}.__flow__" in tensors:
            setattr(agent, name, FlowModel.from_state_dict(tensors, f"{name}."))
    return agent


def save_agent(agent: Agent, path) -> None:
    save_checkpoint(agent_state(agent), path)


def load_agent(path) -> Agent:
    return agent_from_state(load_checkpoint(path))

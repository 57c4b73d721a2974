"""Episode storage and hindsight trajectory-tuple sampling.

A tuple drawn at step ``k`` of an episode is ``(o, tau_o, tau_a, d, g)``:
``tau_o[j] = obs[k + j*S_o]`` and ``tau_a[j] = act[k + j*S_a]`` (indices past
the end repeat the final row), ``d ~ U{0..min(L_g, T-1-k)}`` and
``g = obs[k + d]``.

Episode file layout (little-endian)::

    b"EFED" | version u32 (=1) | dim_o u32 | dim_a u32 | episode_count u32
    per episode: T u32 | f32 obs (T*dim_o) | f32 actions (T*dim_a)
    obs_mean f32*dim_o | obs_scale f32*dim_o | act_mean f32*dim_a | act_scale f32*dim_a
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from efm.errors import ContractError, DimensionError, FormatError
from efm.nn import DTYPE

MAGIC = b"EFED"
VERSION = 1
_U32 = struct.Struct("<I")
_MIN_SCALE = 1e-6


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=DTYPE)
        self.actions = np.ascontiguousarray(self.actions, dtype=DTYPE)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise DimensionError("episode observations and actions must be 2D")
        if len(self.observations) != len(self.actions):
            raise DimensionError("episode observation/action row counts differ")
        if len(self.observations) < 2:
            raise ContractError("episodes need at least 2 steps")
        if not (np.isfinite(self.observations).all() and np.isfinite(self.actions).all()):
            raise ContractError("episode contains non-finite values")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class SamplerConfig:
    L_o: int = 8
    S_o: int = 4
    L_a: int = 8
    S_a: int = 2
    L_g: int = 400

    def __post_init__(self):
        for name in ("L_o", "S_o", "L_a", "S_a", "L_g"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")


@dataclass
class TrajectoryTuple:
    o: np.ndarray
    tau_o: np.ndarray
    tau_a: np.ndarray
    d: int
    g: np.ndarray
    episode: int = -1
    k: int = -1


@dataclass
class TupleBatch:
    o: np.ndarray
    tau_o: np.ndarray
    tau_a: np.ndarray
    d: np.ndarray
    g: np.ndarray
    episode: np.ndarray
    k: np.ndarray

    def __len__(self) -> int:
        return len(self.o)


class EpisodeStore:
    """Immutable collection of episodes plus per-dimension normalisation stats."""

    def __init__(
        self,
        episodes: Sequence[Episode],
        dim_o: int | None = None,
        dim_a: int | None = None,
        stats: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
    ):
        self.episodes = list(episodes)
        if self.episodes:
            dim_o = self.episodes[0].observations.shape[1] if dim_o is None else dim_o
            dim_a = self.episodes[0].actions.shape[1] if dim_a is None else dim_a
        if dim_o is None or dim_a is None:
            raise ContractError("empty store needs explicit dim_o and dim_a")
        self.dim_o, self.dim_a = int(dim_o), int(dim_a)
        for i, ep in enumerate(self.episodes):
            if ep.observations.shape[1] != self.dim_o or ep.actions.shape[1] != self.dim_a:
                raise DimensionError(f"episode {i} dims do not match store dims")
        self.lengths = np.array([len(ep) for ep in self.episodes], dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)
        if self.episodes:
            self.obs_all = np.concatenate([ep.observations for ep in self.episodes])
            self.act_all = np.concatenate([ep.actions for ep in self.episodes])
        else:
            self.obs_all = np.zeros((0, self.dim_o), dtype=DTYPE)
            self.act_all = np.zeros((0, self.dim_a), dtype=DTYPE)
        # per global row: owning episode
        self.row_episode = np.repeat(np.arange(len(self.episodes)), self.lengths)
        self.stats = stats if stats is not None else self._compute_stats()

    def _compute_stats(self):
        def moments(x, dim):
            if len(x) == 0:
                return np.zeros(dim, DTYPE), np.ones(dim, DTYPE)
            mean = x.astype(np.float64).mean(axis=0)
            scale = np.maximum(x.astype(np.float64).std(axis=0), _MIN_SCALE)
            return mean.astype(DTYPE), scale.astype(DTYPE)

        om, os_ = moments(self.obs_all, self.dim_o)
        am, as_ = moments(self.act_all, self.dim_a)
        return om, os_, am, as_

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def total_steps(self) -> int:
        return int(self.lengths.sum())

    def normalize_obs(self, obs):
        return ((np.asarray(obs, dtype=DTYPE) - self.stats[0]) / self.stats[1]).astype(DTYPE)

    def denormalize_obs(self, obs):
        return (np.asarray(obs, dtype=DTYPE) * self.stats[1] + self.stats[0]).astype(DTYPE)

    def normalize_act(self, act):
        return ((np.asarray(act, dtype=DTYPE) - self.stats[2]) / self.stats[3]).astype(DTYPE)

    def denormalize_act(self, act):
        return (np.asarray(act, dtype=DTYPE) * self.stats[3] + self.stats[2]).astype(DTYPE)


def _check_nonempty(store: EpisodeStore) -> None:
    if store.total_steps == 0:
        raise ContractError("cannot sample from an empty episode store")


def sample_batch(store: EpisodeStore, config: SamplerConfig, rng: np.random.Generator, n: int) -> TupleBatch:
    """Vectorised hindsight sampling; every timestep in the store is equally likely."""
    _check_nonempty(store)
    rows = rng.integers(0, store.total_steps, size=n)
    ep = store.row_episode[rows]
    start = store.starts[ep]
    last = start + store.lengths[ep] - 1
    k = rows - start
    horizon = np.minimum(config.L_g, last - rows)
    d = rng.integers(0, horizon + 1)
    obs_idx = np.minimum(rows[:, None] + config.S_o * np.arange(config.L_o)[None, :], last[:, None])
    act_idx = np.minimum(rows[:, None] + config.S_a * np.arange(config.L_a)[None, :], last[:, None])
    return TupleBatch(
        o=store.obs_all[rows],
        tau_o=store.obs_all[obs_idx],
        tau_a=store.act_all[act_idx],
        d=d.astype(np.int64),
        g=store.obs_all[rows + d],
        episode=ep,
        k=k,
    )


def sample_tuple(store: EpisodeStore, config: SamplerConfig, rng: np.random.Generator) -> TrajectoryTuple:
    b = sample_batch(store, config, rng, 1)
    return TrajectoryTuple(b.o[0], b.tau_o[0], b.tau_a[0], int(b.d[0]), b.g[0], int(b.episode[0]), int(b.k[0]))


def sample_unrelated_goals(store: EpisodeStore, rng: np.random.Generator, n: int) -> np.ndarray:
    _check_nonempty(store)
    return store.obs_all[rng.integers(0, store.total_steps, size=n)]


def sample_unrelated_goal(store: EpisodeStore, rng: np.random.Generator) -> np.ndarray:
    """One observation row drawn uniformly from the whole store."""
    return sample_unrelated_goals(store, rng, 1)[0]


def encode_store(store: EpisodeStore) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(store.dim_o), _U32.pack(store.dim_a), _U32.pack(len(store))]
    for ep in store.episodes:
        chunks.append(_U32.pack(len(ep)))
        chunks.append(ep.observations.astype("<f4").tobytes())
        chunks.append(ep.actions.astype("<f4").tobytes())
    for block in store.stats:
        chunks.append(np.asarray(block, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_store(buf: bytes) -> EpisodeStore:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated episode file while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    def f32(count: int, what: str) -> np.ndarray:
        return np.frombuffer(take(4 * count, what), dtype="<f4").astype(DTYPE)

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an EFED episode file", 0)
    version = u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported episode file version {version}", 4)
    dim_o, dim_a, count = u32("dim_o"), u32("dim_a"), u32("episode count")
    episodes = []
    for i in range(count):
        at = pos
        T = u32(f"length of episode {i}")
        if T < 2:
            raise FormatError(f"episode {i} has {T} steps, need at least 2", at)
        obs = f32(T * dim_o, f"observations of episode {i}").reshape(T, dim_o)
        act = f32(T * dim_a, f"actions of episode {i}").reshape(T, dim_a)
        try:
            episodes.append(Episode(obs, act))
        except ContractError as exc:
            raise FormatError(f"episode {i}: {exc}", at) from None
    stats = (
        f32(dim_o, "observation mean"),
        f32(dim_o, "observation scale"),
        f32(dim_a, "action mean"),
        f32(dim_a, "action scale"),
    )
    if pos != len(buf):
        raise FormatError("trailing bytes after normalisation blocks", pos)
    return EpisodeStore(episodes, dim_o, dim_a, stats)


def save_store(store: EpisodeStore, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_store(store))
    os.replace(tmp, path)


def load_store(path: str | os.PathLike) -> EpisodeStore:
    return decode_store(Path(path).read_bytes())

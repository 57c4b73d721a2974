"""Fixed initial/goal observation pairs shared by every agent evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from efm.errors import ConfigError
from efm.envs.demos import _Recorder, plan_path
from efm.envs.maze import EnvState, MazeSpec

# (object start, corner index); the pusher starts just below the object
DEFAULT_LAYOUT = (
    ((0.50, 0.50), 1),  # middle -> top-left, one door
    ((0.50, 0.50), 2),  # middle -> bottom-right, one door
    ((0.50, 0.20), 0),  # middle bottom -> bottom-left, round the wall
    ((0.50, 0.80), 3),  # middle top -> top-right, round the wall
    ((0.15, 0.50), 2),  # left -> bottom-right, both doors
    ((0.85, 0.50), 1),  # right -> top-left, both doors
    ((0.15, 0.25), 3),  # left bottom -> top-right
    ((0.85, 0.75), 0),  # right top -> bottom-left
)


@dataclass(frozen=True)
class EvalPair:
    pair_id: int
    start: np.ndarray
    goal: np.ndarray

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "start": [float(v) for v in self.start], "goal": [float(v) for v in self.goal]}


def _goal_observation(spec: MazeSpec, start: EnvState, corner: np.ndarray) -> np.ndarray:
    path = plan_path(spec, start.object_pos, corner)
    if path is None:
        raise ConfigError(f"corner {corner.tolist()} unreachable from {start.object_pos.tolist()}")
    rec = _Recorder(spec, start, np.random.default_rng(0), noise=0.0)
    if not rec.run_to(corner, 0.03, 2000, path=path):
        raise ConfigError(f"scripted pusher failed to reach corner {corner.tolist()}")
    return rec.obs[-1]


def default_eval_pairs(spec: MazeSpec | None = None) -> list[EvalPair]:
    """Eight cross-region pairs; goals are final states of scripted expert runs."""
    spec = spec or MazeSpec()
    pairs = []
    for i, (obj, corner_idx) in enumerate(DEFAULT_LAYOUT):
        obj = np.array(obj, dtype=np.float64)
        agent = obj - np.array([0.0, spec.agent_radius + spec.object_radius + 0.02])
        start = EnvState.from_observation(EnvState(agent, obj).observation())
        corner = np.array(spec.corner_goals[corner_idx], dtype=np.float64)
        goal = _goal_observation(spec, start, corner)
        pairs.append(EvalPair(i, start.observation(), goal))
    return pairs


def save_pairs(pairs: list[EvalPair], path) -> None:
    Path(path).write_text(yaml.safe_dump({"pairs": [p.to_dict() for p in pairs]}, sort_keys=False))


def load_pairs(path) -> list[EvalPair]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"pairs file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if set(data) != {"pairs"}:
        raise ConfigError(f"pairs file must contain exactly the key 'pairs', got {sorted(data)}")
    out = []
    for entry in data["pairs"]:
        if set(entry) != {"pair_id", "start", "goal"}:
            raise ConfigError(f"bad pair entry keys {sorted(entry)}")
        out.append(EvalPair(int(entry["pair_id"]), np.array(entry["start"], dtype=np.float32), np.array(entry["goal"], dtype=np.float32)))
    return out

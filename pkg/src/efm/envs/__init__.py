"""Planar maze pushing environment and scripted demonstrators."""

from efm.envs.maze import (
    EnvState,
    MazeSpec,
    clamp_action,
    is_valid,
    resolve_walls,
    step,
    success,
    wall_distance,
    with_overrides,
)
from efm.envs.demos import BEHAVIORS, generate_demos, plan_path

__all__ = [
    "BEHAVIORS",
    "EnvState",
    "MazeSpec",
    "clamp_action",
    "generate_demos",
    "is_valid",
    "plan_path",
    "resolve_walls",
    "step",
    "success",
    "wall_distance",
    "with_overrides",
]

"""Planar maze pushing: a small pusher disk moves a passive object disk.

Contact is purely positional. The pusher moves by its (clamped) command,
slides out of walls, and if it overlaps the object the object is displaced
along the line of centres by the penetration depth, itself sliding out of
walls. If that would leave an invalid state, or move the object further than
the pusher, the object stays put and the pusher slides around it instead. A
move that still cannot be resolved is retried at half length a few times and
otherwise dropped, so every returned state is valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from efm.errors import ConfigError, ContractError

Rect = tuple[float, float, float, float]  # x0, y0, x1, y1

_TOL = 1e-6
_HALVINGS = 4


@dataclass(frozen=True)
class MazeSpec:
    walls: tuple[Rect, ...] = (
        (0.323, 0.0, 0.343, 0.60),
        (0.657, 0.40, 0.677, 1.0),
    )
    regions: tuple[Rect, ...] = (
        (0.0, 0.0, 1.0 / 3.0, 1.0),
        (1.0 / 3.0, 0.0, 2.0 / 3.0, 1.0),
        (2.0 / 3.0, 0.0, 1.0, 1.0),
    )
    corner_goals: tuple[tuple[float, float], ...] = (
        (0.08, 0.08),
        (0.08, 0.92),
        (0.92, 0.08),
        (0.92, 0.92),
    )
    bounds: Rect = (0.0, 0.0, 1.0, 1.0)
    agent_radius: float = 0.03
    object_radius: float = 0.06
    step_max: float = 0.02
    tol_success: float = 0.08

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "walls": [list(w) for w in self.walls],
            "regions": [list(r) for r in self.regions],
            "corner_goals": [list(c) for c in self.corner_goals],
            "agent_radius": self.agent_radius,
            "object_radius": self.object_radius,
            "step_max": self.step_max,
            "tol_success": self.tol_success,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MazeSpec":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown maze keys: {sorted(unknown)}")
        kwargs = {}
        for key in ("walls", "regions"):
            if key in data:
                kwargs[key] = tuple(tuple(float(v) for v in r) for r in data[key])
        if "corner_goals" in data:
            kwargs["corner_goals"] = tuple(tuple(float(v) for v in c) for c in data["corner_goals"])
        if "bounds" in data:
            kwargs["bounds"] = tuple(float(v) for v in data["bounds"])
        for key in ("agent_radius", "object_radius", "step_max", "tol_success"):
            if key in data:
                kwargs[key] = float(data[key])
        spec = cls(**kwargs)
        if len(spec.regions) != 3:
            raise ConfigError("maze needs exactly 3 regions")
        return spec

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "MazeSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def region_of(self, point) -> int:
        """Index of the region containing ``point`` (half-open on the upper edges)."""
        x, y = float(point[0]), float(point[1])
        for i, (x0, y0, x1, y1) in enumerate(self.regions):
            last_x = x1 >= self.bounds[2]
            last_y = y1 >= self.bounds[3]
            if x0 <= x and (x < x1 or (last_x and x <= x1)) and y0 <= y and (y < y1 or (last_y and y <= y1)):
                return i
        return -1


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    object_pos: np.ndarray

    @classmethod
    def from_observation(cls, obs) -> "EnvState":
        obs = np.asarray(obs, dtype=np.float64)
        return cls(obs[:2].copy(), obs[2:4].copy())

    def observation(self) -> np.ndarray:
        return np.concatenate([self.agent_pos, self.object_pos]).astype(np.float32)


def wall_distance(point, spec: MazeSpec) -> float:
    """Distance from ``point`` to the nearest wall or world edge."""
    p = np.asarray(point, dtype=np.float64)
    bx0, by0, bx1, by1 = spec.bounds
    best = min(p[0] - bx0, p[1] - by0, bx1 - p[0], by1 - p[1])
    for x0, y0, x1, y1 in spec.walls:
        q = np.clip(p, (x0, y0), (x1, y1))
        d = float(np.hypot(*(p - q)))
        if d == 0.0:
            d = -min(p[0] - x0, x1 - p[0], p[1] - y0, y1 - p[1])
        best = min(best, d)
    return float(best)


def circle_clear(point, radius: float, spec: MazeSpec) -> bool:
    return wall_distance(point, spec) >= radius - _TOL


def _push_out_rect(p: np.ndarray, r: float, rect: Rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    q = np.clip(p, (x0, y0), (x1, y1))
    diff = p - q
    dist = float(np.hypot(*diff))
    if dist >= r:
        return p
    if dist > 1e-12:
        return q + diff / dist * r
    # centre inside the rectangle: leave through the nearest face
    exits = [(p[0] - x0, (x0 - r, p[1])), (x1 - p[0], (x1 + r, p[1])),
             (p[1] - y0, (p[0], y0 - r)), (y1 - p[1], (p[0], y1 + r))]
    return np.array(min(exits, key=lambda e: e[0])[1], dtype=np.float64)


def resolve_walls(p, r: float, spec: MazeSpec) -> np.ndarray:
    """Project a disk centre out of every wall and back inside the world."""
    p = np.array(p, dtype=np.float64)
    bx0, by0, bx1, by1 = spec.bounds
    for _ in range(4):
        p = np.clip(p, (bx0 + r, by0 + r), (bx1 - r, by1 - r))
        for rect in spec.walls:
            p = _push_out_rect(p, r, rect)
        if circle_clear(p, r, spec):
            break
    return np.clip(p, (bx0 + r, by0 + r), (bx1 - r, by1 - r))


def clamp_action(delta, step_max: float) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64).reshape(2)
    if not np.isfinite(d).all():
        raise ContractError(f"non-finite action {d}")
    norm = float(np.hypot(*d))
    if norm > step_max:
        d = d * (step_max / norm)
    return d


def is_valid(state: EnvState, spec: MazeSpec) -> bool:
    R = spec.agent_radius + spec.object_radius
    return (
        circle_clear(state.agent_pos, spec.agent_radius, spec)
        and circle_clear(state.object_pos, spec.object_radius, spec)
        and float(np.hypot(*(state.agent_pos - state.object_pos))) >= R - _TOL
    )


def _contact_normals(p: np.ndarray, r: float, spec: MazeSpec, reach: float):
    """``(outward unit normal, free gap)`` for each wall or world edge within ``r + reach``."""
    bx0, by0, bx1, by1 = spec.bounds
    out = []
    for edge, n in ((p[0] - bx0, (1.0, 0.0)), (bx1 - p[0], (-1.0, 0.0)),
                    (p[1] - by0, (0.0, 1.0)), (by1 - p[1], (0.0, -1.0))):
        if edge < r + reach:
            out.append((np.array(n), max(edge - r, 0.0)))
    for x0, y0, x1, y1 in spec.walls:
        q = np.clip(p, (x0, y0), (x1, y1))
        diff = p - q
        d = float(np.hypot(*diff))
        if 1e-12 < d < r + reach:
            out.append((diff / d, max(d - r, 0.0)))
    return out


def _slide(p: np.ndarray, move: np.ndarray, r: float, spec: MazeSpec) -> np.ndarray:
    """Limit ``move`` so it never drives further into a wall than the free gap."""
    reach = float(np.hypot(*move)) + _TOL
    for _ in range(2):
        for n, gap in _contact_normals(p, r, spec, reach):
            into = float(np.dot(move, n))
            if into < -gap:
                move = move - (into + gap) * n
    return move


_PUSH_SCALES = (1.0, 0.75, 0.5, 0.25, 0.125)


def _attempt(state: EnvState, delta: np.ndarray, spec: MazeSpec) -> EnvState | None:
    ra, ro = spec.agent_radius, spec.object_radius
    R = ra + ro
    agent = resolve_walls(state.agent_pos + _slide(state.agent_pos, delta, ra, spec), ra, spec)
    if float(np.hypot(*(agent - state.agent_pos))) > float(np.hypot(*delta)) + 1e-9:
        return None
    obj = state.object_pos
    gap = obj - agent
    dist = float(np.hypot(*gap))
    if dist >= R:
        new = EnvState(agent, np.array(obj, dtype=np.float64))
        return new if is_valid(new, spec) else None
    if dist <= 1e-12:
        return None
    normal = gap / dist
    push = _slide(obj, normal * (R - dist), ro, spec)
    # shrink the push until the object does not outrun the pusher; scale 0
    # leaves the object in place with the pusher sliding around it
    for scale in _PUSH_SCALES:
        pushed = resolve_walls(obj + scale * push, ro, spec)
        back = agent - pushed
        dist2 = float(np.hypot(*back))
        if dist2 <= 1e-12:
            continue
        new = EnvState(agent if dist2 >= R else pushed + back / dist2 * R, pushed)
        moved_agent = float(np.hypot(*(new.agent_pos - state.agent_pos)))
        moved_obj = float(np.hypot(*(new.object_pos - state.object_pos)))
        if is_valid(new, spec) and moved_obj <= moved_agent + _TOL:
            return new
    new = EnvState(obj - normal * R, np.array(obj, dtype=np.float64))
    return new if is_valid(new, spec) else None


def step(state: EnvState, action, spec: MazeSpec) -> EnvState:
    """Apply one displacement command; pure function of its inputs."""
    delta = clamp_action(action, spec.step_max)
    for _ in range(_HALVINGS + 1):
        new = _attempt(state, delta, spec)
        if new is not None:
            return new
        delta = 0.5 * delta
    return EnvState(state.agent_pos.copy(), state.object_pos.copy())


def success(state, goal_obs, spec: MazeSpec) -> bool:
    """True iff the object is strictly closer than ``tol_success`` to the goal's object."""
    obj = state.object_pos if isinstance(state, EnvState) else np.asarray(state, dtype=np.float64)[2:4]
    goal = np.asarray(goal_obs, dtype=np.float64)[2:4]
    return float(np.hypot(*(obj - goal))) < spec.tol_success


def with_overrides(spec: MazeSpec, **kwargs) -> MazeSpec:
    return replace(spec, **kwargs)

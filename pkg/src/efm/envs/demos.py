"""Scripted pushers that record the three demonstration datasets.

* ``expert``: push the object from a random start to a random maze corner along
  the shortest grid path.
* ``full``: push the object through a random sequence of waypoints anywhere in
  the maze.
* ``partitioned``: like ``full`` but every waypoint (and the whole object
  trajectory) stays inside one region per episode.

The controller gets behind the object relative to a look-ahead point on the
path (orbiting around it when needed) and then pushes.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from efm.dataset import Episode, EpisodeStore
from efm.envs.maze import EnvState, MazeSpec, circle_clear, clamp_action, step, wall_distance
from efm.errors import ConfigError, ContractError

log = logging.getLogger(__name__)

BEHAVIORS = ("expert", "full", "partitioned")

GRID = 0.02
PATH_CLEARANCE = 0.10
LOOKAHEAD = 0.08
ORBIT_GAP = 0.025
ALIGN_DEG = 25.0
ACTION_NOISE = 0.2  # fraction of step_max, play behaviours only
WAYPOINT_JITTER = 0.02
MAX_RETRIES = 20
MIN_EXPERT_PATH = 0.8


def parse_behavior(name: str) -> str:
    aliases = {"expert": "expert", "full": "full", "partitioned": "partitioned",
               "fullplay": "full", "partitionedplay": "partitioned"}
    key = name.lower().replace("_", "").replace("-", "")
    if key not in aliases:
        raise ConfigError(f"unknown behavior {name!r}; expected one of {{expert, full, partitioned}}")
    return aliases[key]


# ---------------------------------------------------------------- planning

@lru_cache(maxsize=None)
def _clearance_grid(spec: MazeSpec) -> tuple[np.ndarray, np.ndarray]:
    n = int(round(1.0 / GRID)) + 1
    coords = np.linspace(0.0, 1.0, n)
    clear = np.array([[wall_distance((x, y), spec) for y in coords] for x in coords])
    return coords, clear


def _free_mask(spec: MazeSpec, region: int | None, clearance: float) -> np.ndarray:
    coords, clear = _clearance_grid(spec)
    mask = clear >= clearance
    if region is not None:
        x0, y0, x1, y1 = spec.regions[region]
        m = 0.02
        inside_x = (coords >= x0 + m) & (coords <= x1 - m)
        inside_y = (coords >= y0 + m) & (coords <= y1 - m)
        mask &= inside_x[:, None] & inside_y[None, :]
    return mask


def _nearest_free(mask: np.ndarray, point) -> tuple[int, int] | None:
    coords = _clearance_grid_coords(mask.shape[0])
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return None
    pts = coords[idx]
    best = int(np.argmin(((pts - np.asarray(point)) ** 2).sum(axis=1)))
    return int(idx[best, 0]), int(idx[best, 1])


@lru_cache(maxsize=None)
def _clearance_grid_coords(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


_NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def _dijkstra(mask: np.ndarray, goal: tuple[int, int]) -> np.ndarray:
    n = mask.shape[0]
    dist = np.full(mask.shape, np.inf)
    dist[goal] = 0.0
    heap = [(0.0, goal)]
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if d > dist[i, j]:
            continue
        for dx, dy in _NEIGHBOURS:
            a, b = i + dx, j + dy
            if 0 <= a < n and 0 <= b < n and mask[a, b]:
                if dx and dy and not (mask[i + dx, j] and mask[i, j + dy]):
                    continue
                nd = d + (1.4142135623730951 if dx and dy else 1.0)
                if nd < dist[a, b]:
                    dist[a, b] = nd
                    heapq.heappush(heap, (nd, (a, b)))
    return dist * GRID


def _segment_clear(p, q, clearance: float, spec: MazeSpec, region: int | None) -> bool:
    p, q = np.asarray(p), np.asarray(q)
    n = max(2, int(np.ceil(np.hypot(*(q - p)) / (GRID / 2))))
    for s in np.linspace(0.0, 1.0, n):
        x = p + s * (q - p)
        if wall_distance(x, spec) < clearance:
            return False
        if region is not None and spec.region_of(x) != region:
            return False
    return True


def plan_path(spec: MazeSpec, start, goal, clearance: float = PATH_CLEARANCE, region: int | None = None) -> list[np.ndarray] | None:
    """Shortest grid path for the object centre, shortcut by line of sight.

    Start and goal may sit closer to walls than ``clearance``; they are joined
    to the nearest planning node by a straight segment.
    """
    mask = _free_mask(spec, region, clearance)
    s = _nearest_free(mask, start)
    g = _nearest_free(mask, goal)
    if s is None or g is None:
        return None
    dist = _dijkstra(mask, g)
    if not np.isfinite(dist[s]):
        return None
    coords = _clearance_grid_coords(mask.shape[0])
    n = mask.shape[0]
    cells = [s]
    i, j = s
    while (i, j) != g:
        best, nxt = dist[i, j], None
        for dx, dy in _NEIGHBOURS:
            a, b = i + dx, j + dy
            if 0 <= a < n and 0 <= b < n and dist[a, b] < best - 1e-12:
                best, nxt = dist[a, b], (a, b)
        if nxt is None:
            return None
        i, j = nxt
        cells.append(nxt)
    raw = [np.asarray(start, dtype=np.float64)]
    raw += [np.array([coords[a], coords[b]]) for a, b in cells]
    raw.append(np.asarray(goal, dtype=np.float64))
    path = [raw[0]]
    k = 0
    while k < len(raw) - 1:
        far = len(raw) - 1
        while far > k + 1 and not _segment_clear(raw[k], raw[far], min(clearance, 0.065), spec, region):
            far -= 1
        path.append(raw[far])
        k = far
    return path


def path_length(path) -> float:
    return float(sum(np.hypot(*(b - a)) for a, b in zip(path[:-1], path[1:])))


# ---------------------------------------------------------------- control

def _unit(v) -> np.ndarray:
    n = float(np.hypot(*v))
    return v / n if n > 1e-12 else np.zeros(2)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


class PathFollower:
    """Tracks progress along a piecewise-linear object path."""

    def __init__(self, path):
        self.path = [np.asarray(p, dtype=np.float64) for p in path]
        self.seg = 0

    def lookahead(self, obj: np.ndarray, distance: float = LOOKAHEAD) -> np.ndarray:
        # advance while the object has passed the end of the current segment
        while self.seg < len(self.path) - 2:
            a, b = self.path[self.seg], self.path[self.seg + 1]
            ab = b - a
            s = float(np.dot(obj - a, ab) / max(np.dot(ab, ab), 1e-12))
            if s >= 1.0 or np.hypot(*(obj - b)) < distance:
                self.seg += 1
            else:
                break
        a, b = self.path[self.seg], self.path[self.seg + 1]
        ab = b - a
        s = float(np.clip(np.dot(obj - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0))
        point = a + s * ab
        remaining = distance
        seg = self.seg
        while True:
            end = self.path[seg + 1]
            left = float(np.hypot(*(end - point)))
            if left >= remaining or seg + 1 == len(self.path) - 1:
                if left < 1e-12:
                    return end
                return point + _unit(end - point) * min(remaining, left)
            remaining -= left
            point = end
            seg += 1


def _arc_clear(obj, alpha: float, span: float, radius: float, spec: MazeSpec) -> bool:
    n = max(2, int(abs(span) / math.radians(8.0)) + 1)
    for a in np.linspace(alpha, alpha + span, n)[1:]:
        if not circle_clear(obj + radius * np.array([math.cos(a), math.sin(a)]), spec.agent_radius, spec):
            return False
    return True


class PushController:
    """Gets behind the object relative to a target point, then pushes.

    The orbit direction is sticky until the pusher is aligned again, which
    avoids dithering when one way around the object is blocked.
    """

    def __init__(self, spec: MazeSpec):
        self.spec = spec
        self.orbit_dir = 0.0

    def command(self, state: EnvState, target: np.ndarray) -> np.ndarray:
        spec = self.spec
        agent, obj = state.agent_pos, state.object_pos
        R = spec.agent_radius + spec.object_radius
        rho = R + ORBIT_GAP
        tight = R + 0.008
        u = _unit(target - obj)
        if not u.any():
            return np.zeros(2)
        rel = agent - obj
        dist = float(np.hypot(*rel))
        alpha = math.atan2(rel[1], rel[0])
        beta = math.atan2(-u[1], -u[0])
        diff = _wrap(beta - alpha)

        if abs(diff) < math.radians(ALIGN_DEG):
            self.orbit_dir = 0.0
            if dist < R + 0.02:
                behind = obj - u * R
                lateral = behind - agent
                lateral -= np.dot(lateral, u) * u
                return u * spec.step_max + 0.5 * lateral
            return obj - u * (R + 0.003) - agent
        if dist > rho + 0.05:
            return obj + rel / dist * rho - agent

        if self.orbit_dir == 0.0:
            short = 1.0 if diff >= 0 else -1.0
            long_span = diff - short * 2 * math.pi
            if _arc_clear(obj, alpha, diff, tight, spec):
                self.orbit_dir = short
            elif _arc_clear(obj, alpha, long_span, tight, spec):
                self.orbit_dir = -short
            else:
                self.orbit_dir = short
        step_angle = spec.step_max / rho
        a = alpha + self.orbit_dir * step_angle
        for radius in (rho, R + 0.015, tight):
            goal = obj + radius * np.array([math.cos(a), math.sin(a)])
            if circle_clear(goal, spec.agent_radius, spec):
                return goal - agent
        return goal - agent


def push_command(state: EnvState, target: np.ndarray, spec: MazeSpec) -> np.ndarray:
    """Stateless single-step version of :class:`PushController`."""
    return PushController(spec).command(state, target)


# ---------------------------------------------------------------- episodes

@dataclass
class _Recorder:
    spec: MazeSpec
    state: EnvState
    rng: np.random.Generator
    noise: float

    def __post_init__(self):
        self.obs = [self.state.observation()]
        self.act: list[np.ndarray] = []

    def run_to(self, target, tol: float, max_steps: int, region: int | None = None,
               path=None) -> bool:
        follower = PathFollower(path)
        controller = PushController(self.spec)
        best = np.inf
        stall = 0
        for _ in range(max_steps):
            gap = float(np.hypot(*(self.state.object_pos - target)))
            if gap < tol:
                return True
            aim = follower.lookahead(self.state.object_pos)
            cmd = controller.command(self.state, aim)
            if self.noise:
                cmd = cmd + self.rng.normal(0.0, self.noise * self.spec.step_max, size=2)
            # record exactly what is replayable from the stored float32 rows
            cmd = clamp_action(cmd, self.spec.step_max).astype(np.float32)
            nxt = EnvState.from_observation(step(self.state, cmd, self.spec).observation())
            if region is not None and self.spec.region_of(nxt.object_pos) != region:
                return False
            self.act.append(cmd)
            self.state = nxt
            self.obs.append(nxt.observation())
            if gap < best - 1e-3:
                best, stall = gap, 0
            else:
                stall += 1
                if stall > 150:
                    return False
        return False

    def episode(self) -> Episode | None:
        if len(self.obs) < 2:
            return None
        actions = self.act + [np.zeros(2, dtype=np.float32)]
        return Episode(np.array(self.obs), np.array(actions))


def _random_free_point(spec: MazeSpec, rng, clearance: float, region: int | None = None) -> np.ndarray:
    mask = _free_mask(spec, region, clearance)
    idx = np.argwhere(mask)
    coords = _clearance_grid_coords(mask.shape[0])
    for _ in range(100):
        i, j = idx[rng.integers(len(idx))]
        p = np.array([coords[i], coords[j]]) + rng.uniform(-GRID / 2, GRID / 2, size=2)
        if wall_distance(p, spec) >= clearance and (region is None or spec.region_of(p) == region):
            return p
    i, j = idx[0]
    return np.array([coords[i], coords[j]])


def _door_point(spec: MazeSpec, rng, region: int) -> np.ndarray | None:
    """A free point of ``region`` close to its boundary, i.e. at a doorway."""
    x0, y0, x1, y1 = spec.regions[region]
    mask = _free_mask(spec, region, PATH_CLEARANCE)
    coords = _clearance_grid_coords(mask.shape[0])
    cand = []
    for i, j in np.argwhere(mask):
        x, y = coords[i], coords[j]
        near = min(abs(x - x0) if x0 > 0 else 1, abs(x1 - x) if x1 < 1 else 1,
                   abs(y - y0) if y0 > 0 else 1, abs(y1 - y) if y1 < 1 else 1)
        if near <= 0.05:
            cand.append((x, y))
    if not cand:
        return None
    return np.array(cand[rng.integers(len(cand))], dtype=np.float64)


def _start_state(spec: MazeSpec, rng, obj: np.ndarray) -> EnvState:
    R = spec.agent_radius + spec.object_radius
    for _ in range(200):
        angle = rng.uniform(-math.pi, math.pi)
        radius = R + rng.uniform(0.02, 0.12)
        agent = obj + radius * np.array([math.cos(angle), math.sin(angle)])
        if circle_clear(agent, spec.agent_radius, spec) and _segment_clear(obj, agent, spec.agent_radius, spec, None):
            return EnvState.from_observation(EnvState(agent, obj.copy()).observation())
    raise ContractError("could not place the pusher next to the object")


def _expert_episode(spec: MazeSpec, rng) -> Episode | None:
    corner = np.array(spec.corner_goals[rng.integers(len(spec.corner_goals))], dtype=np.float64)
    obj = _random_free_point(spec, rng, PATH_CLEARANCE)
    path = plan_path(spec, obj, corner)
    if path is None or path_length(path) < MIN_EXPERT_PATH:
        return None
    rec = _Recorder(spec, _start_state(spec, rng, obj), rng, noise=0.0)
    if not rec.run_to(corner, 0.03, 800, path=path):
        return None
    return rec.episode()


def _play_episode(spec: MazeSpec, rng, region: int | None) -> Episode | None:
    obj = _random_free_point(spec, rng, PATH_CLEARANCE, region)
    rec = _Recorder(spec, _start_state(spec, rng, obj), rng, noise=ACTION_NOISE)
    n_waypoints = int(rng.integers(3, 7))
    reached, failures = 0, 0
    while reached < n_waypoints and failures < 3:
        if region is not None and rng.random() < 0.35:
            wp = _door_point(spec, rng, region)
            if wp is None:
                wp = _random_free_point(spec, rng, PATH_CLEARANCE, region)
        else:
            wp = _random_free_point(spec, rng, PATH_CLEARANCE, region)
        wp = wp + rng.uniform(-WAYPOINT_JITTER, WAYPOINT_JITTER, size=2)
        path = plan_path(spec, rec.state.object_pos, wp, region=region)
        if path is None or path_length(path) < 0.1:
            failures += 1
            continue
        before = len(rec.obs)
        ok = rec.run_to(wp, 0.05, 500, region=region, path=path)
        if ok:
            reached += 1
        else:
            failures += 1
            if region is not None and spec.region_of(rec.state.object_pos) != region:
                break
            if len(rec.obs) == before:
                continue
    if reached == 0:
        return None
    return rec.episode()


def generate_demos(behavior: str, spec: MazeSpec, n_episodes: int, rng: np.random.Generator) -> EpisodeStore:
    behavior = parse_behavior(behavior)
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    episodes = []
    for i in range(n_episodes):
        for attempt in range(MAX_RETRIES):
            if behavior == "expert":
                ep = _expert_episode(spec, rng)
            elif behavior == "full":
                ep = _play_episode(spec, rng, None)
            else:
                ep = _play_episode(spec, rng, i % len(spec.regions))
            if ep is not None:
                episodes.append(ep)
                break
        else:
            raise ContractError(f"could not generate a feasible {behavior} episode after {MAX_RETRIES} tries")
    return EpisodeStore(episodes)


def region_coverage(store: EpisodeStore, spec: MazeSpec) -> list[set[int]]:
    return [{spec.region_of(p) for p in ep.observations[:, 2:4]} for ep in store.episodes]

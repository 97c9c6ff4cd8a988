"""Waypoint planning over the learned occupancy model plus the low-level
rotate-then-move controller.

Planning runs on a horizontal slice of the occupancy grid. A* searches an
8-connected lattice of positions anchored at the start, one step being 80%
of the agent's body length. An edge is admitted only if the straight
segment between its endpoints stays below the occupancy threshold at a
fixed number of sample points and the destination keeps the safety margin
to every extracted obstacle point. Edge costs and the heuristic are both
Euclidean, so the search returns lattice-optimal paths; the heuristic is
reduced by the goal tolerance because the search may stop at any node
inside that tolerance, and plain distance-to-goal would overestimate the
remaining cost for nodes just outside it.

The controller walks the waypoint list in order: it pops waypoints once
the agent is within half a step of them, rotates in place while the next
waypoint sits more than the alignment tolerance off the heading, and
otherwise takes a forward step toward it. Obstacle-distance queries go
through a grid-bucketed index over the slice's obstacle points; buckets
only narrow the candidate set, every reported distance is exact.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .geometry import AgentState, Control, ControlLimits, wrap_angle
from .voxel_map import OccupancySlice, VoxelMap, occupancy_slice, sample_occ

# Waypoints closer than this fraction of a step count as reached.
ARRIVAL_FRACTION = 0.5


class NoPathError(RuntimeError):
    """The goal cannot be reached on the planning lattice."""


@dataclass(frozen=True)
class PlanConfig:
    """Lattice geometry and admission thresholds for the planner."""

    step: float
    safety: float
    goal_tol: float
    los_samples: int = 100
    tau: float = 0.5

    def __post_init__(self):
        for name in ("step", "safety", "goal_tol", "tau"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.los_samples < 2:
            raise ValueError("los_samples must be at least 2")

    @staticmethod
    def for_body(body_length: float, tau: float = 0.5) -> "PlanConfig":
        return PlanConfig(
            step=0.8 * body_length,
            safety=1.2 * body_length,
            goal_tol=0.8 * body_length,
            tau=tau,
        )


@dataclass(frozen=True)
class Waypoints:
    """Ordered 2D waypoints; the last entry is the goal-adjacent point.

    ``edge_costs`` holds the Euclidean length of each consecutive segment,
    so a path that starts at ``points[0]`` has total length
    ``edge_costs.sum()``.
    """

    points: np.ndarray  # (N, 2) float64
    edge_costs: np.ndarray  # (N - 1,) float64

    @staticmethod
    def from_points(points) -> "Waypoints":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        costs = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.zeros(0)
        return Waypoints(points=pts, edge_costs=costs)

    @staticmethod
    def empty() -> "Waypoints":
        return Waypoints(points=np.zeros((0, 2)), edge_costs=np.zeros(0))

    def advance(self, k: int) -> "Waypoints":
        """Drop the first k waypoints (and the edges that led to them)."""
        if k <= 0:
            return self
        return Waypoints(points=self.points[k:], edge_costs=self.edge_costs[k:])

    @property
    def total_cost(self) -> float:
        return float(self.edge_costs.sum())

    def __len__(self) -> int:
        return len(self.points)


class ObstacleIndex:
    """Grid-bucketed point set answering exact clearance queries."""

    def __init__(self, points: np.ndarray, bucket: float):
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        self.bucket = float(bucket)
        self._cells: dict[tuple[int, int], list[int]] = {}
        keys = np.floor(self.points / self.bucket).astype(int)
        for idx, (i, j) in enumerate(map(tuple, keys)):
            self._cells.setdefault((i, j), []).append(idx)

    def clear_of(self, p, radius: float) -> bool:
        """True iff every indexed point is at distance >= radius from p."""
        if len(self.points) == 0:
            return True
        p = np.asarray(p, dtype=float)
        lo = np.floor((p - radius) / self.bucket).astype(int)
        hi = np.floor((p + radius) / self.bucket).astype(int)
        r2 = radius * radius
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                ids = self._cells.get((i, j))
                if not ids:
                    continue
                d = self.points[ids] - p
                if np.any(d[:, 0] ** 2 + d[:, 1] ** 2 < r2):
                    return False
        return True


def _los_batch(vmap: VoxelMap, a, ends: np.ndarray, height: float, cfg: PlanConfig) -> np.ndarray:
    """Line-of-sight from a to each row of ends, one occupancy query."""
    a = np.asarray(a, dtype=float)
    ends = np.asarray(ends, dtype=float).reshape(-1, 2)
    ts = np.linspace(0.0, 1.0, cfg.los_samples)
    pts = np.empty((len(ends), cfg.los_samples, 3))
    pts[:, :, :2] = a[None, None, :] + ts[None, :, None] * (ends - a)[:, None, :]
    pts[:, :, 2] = height
    vals = sample_occ(vmap, pts.reshape(-1, 3)).reshape(len(ends), cfg.los_samples)
    return np.all(vals < cfg.tau, axis=1)


def line_of_sight(vmap: VoxelMap, a, b, height: float, cfg: PlanConfig) -> bool:
    """True iff the segment a->b stays below tau at every sample point."""
    return bool(_los_batch(vmap, a, np.asarray(b, dtype=float)[None, :], height, cfg)[0])


def shortcut_to_target(
    vmap: VoxelMap,
    sl: OccupancySlice,
    position,
    target,
    cfg: PlanConfig,
    index: ObstacleIndex | None = None,
) -> bool:
    """True iff a straight line to the target is free and keeps the margin."""
    if not line_of_sight(vmap, position, target, sl.height, cfg):
        return False
    if index is None:
        index = ObstacleIndex(sl.points, bucket=cfg.safety)
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    ts = np.linspace(0.0, 1.0, cfg.los_samples)
    for t in ts:
        if not index.clear_of(position + t * (target - position), cfg.safety):
            return False
    return True


_NEIGHBOURS = (
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (1, -1), (-1, 1), (-1, -1),
)


def astar_plan(
    sl: OccupancySlice,
    vmap: VoxelMap,
    start,
    goal,
    cfg: PlanConfig,
    max_expansions: int = 200_000,
) -> Waypoints:
    """Shortest lattice path from start to within goal_tol of goal.

    Returns the path including the start as its first point. Raises
    NoPathError when the goal set cannot be reached (or the start itself
    violates the safety margin).
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    index = ObstacleIndex(sl.points, bucket=cfg.safety)
    if not index.clear_of(start, cfg.safety):
        raise NoPathError("start position violates the safety margin")

    # Lattice positions must stay on the mapped slice (one cell of grace);
    # this bounds the search when the goal is unreachable.
    lo = sl.origin - sl.cell
    hi = sl.origin + (np.asarray(sl.occupied.shape) - 1) * sl.cell + sl.cell

    step = cfg.step
    diag = step * math.sqrt(2.0)

    def position(ij):
        return start + step * np.asarray(ij, dtype=float)

    def heuristic(p):
        return max(0.0, float(np.linalg.norm(goal - p)) - cfg.goal_tol)

    start_key = (0, 0)
    g: dict[tuple[int, int], float] = {start_key: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    node_clear: dict[tuple[int, int], bool] = {start_key: True}
    closed: set[tuple[int, int]] = set()
    heap: list[tuple[float, int, tuple[int, int]]] = []
    tie = 0
    heapq.heappush(heap, (heuristic(start), tie, start_key))

    expansions = 0
    while heap:
        _, _, key = heapq.heappop(heap)
        if key in closed:
            continue
        closed.add(key)
        p = position(key)
        if float(np.linalg.norm(goal - p)) < cfg.goal_tol:
            path = [key]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            path.reverse()
            pts = np.array([position(k) for k in path])
            costs = np.array(
                [diag if (a[0] != b[0] and a[1] != b[1]) else step for a, b in zip(path, path[1:])]
            )
            return Waypoints(points=pts, edge_costs=costs)
        expansions += 1
        if expansions > max_expansions:
            raise NoPathError("search budget exhausted")
        candidates = []
        for di, dj in _NEIGHBOURS:
            nkey = (key[0] + di, key[1] + dj)
            if nkey in closed:
                continue
            cost = diag if (di != 0 and dj != 0) else step
            tentative = g[key] + cost
            if tentative >= g.get(nkey, math.inf):
                continue
            q = position(nkey)
            if not (lo[0] <= q[0] <= hi[0] and lo[1] <= q[1] <= hi[1]):
                continue
            clear = node_clear.get(nkey)
            if clear is None:
                clear = index.clear_of(q, cfg.safety)
                node_clear[nkey] = clear
            if not clear:
                continue
            candidates.append((nkey, q, tentative))
        if not candidates:
            continue
        visible = _los_batch(vmap, p, np.array([q for _, q, _ in candidates]), sl.height, cfg)
        for (nkey, q, tentative), ok in zip(candidates, visible):
            if not ok:
                continue
            g[nkey] = tentative
            parent[nkey] = key
            tie += 1
            heapq.heappush(heap, (tentative + heuristic(q), tie, nkey))
    raise NoPathError("goal unreachable on the planning lattice")


def plan_route(
    vmap: VoxelMap,
    start,
    goal,
    cfg: PlanConfig,
    height: float,
) -> Waypoints:
    """Slice the map at the given height, shortcut if possible, else A*."""
    sl = occupancy_slice(vmap, height, cfg.tau)
    index = ObstacleIndex(sl.points, bucket=cfg.safety)
    if shortcut_to_target(vmap, sl, start, goal, cfg, index=index):
        return Waypoints.from_points([goal])
    return astar_plan(sl, vmap, start, goal, cfg)


def next_control(
    z_est: AgentState,
    wp: Waypoints,
    limits: ControlLimits,
    cfg: PlanConfig,
) -> tuple[Control | None, Waypoints]:
    """Rotate-then-move controller; (None, empty) signals episode complete."""
    pos = np.array([z_est.x, z_est.y])
    arrive = ARRIVAL_FRACTION * cfg.step
    k = 0
    while k < len(wp.points) and np.linalg.norm(wp.points[k] - pos) < arrive:
        k += 1
    wp = wp.advance(k)
    if len(wp) == 0:
        return None, wp
    target = wp.points[0]
    desired = math.atan2(target[1] - pos[1], target[0] - pos[0])
    err = wrap_angle(desired - z_est.heading)
    if abs(err) > limits.align:
        turn = float(np.clip(err, -limits.max_turn, limits.max_turn))
        return Control(turn=turn, move_dir=z_est.heading, speed=0.0), wp
    dist = float(np.linalg.norm(target - pos))
    return Control(turn=0.0, move_dir=desired, speed=min(dist, limits.max_speed)), wp


# ------------------------------------------------------------------ file IO


def save_plan(path: str, wp: Waypoints, start=None, goal=None) -> None:
    """Write the waypoint list (plus per-edge costs) as JSON, atomically."""
    doc = {
        "waypoints": [[float(x), float(y)] for x, y in wp.points],
        "edge_costs": [float(c) for c in wp.edge_costs],
    }
    if start is not None:
        doc["start"] = [float(start[0]), float(start[1])]
    if goal is not None:
        doc["goal"] = [float(goal[0]), float(goal[1])]
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_plan(path: str) -> Waypoints:
    with open(path) as fh:
        doc = json.load(fh)
    pts = np.asarray(doc["waypoints"], dtype=float).reshape(-1, 2)
    costs = np.asarray(doc["edge_costs"], dtype=float)
    if len(costs) != max(0, len(pts) - 1):
        raise ValueError("edge_costs length does not match waypoint count")
    return Waypoints(points=pts, edge_costs=costs)

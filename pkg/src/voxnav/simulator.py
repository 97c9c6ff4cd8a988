"""Planar 2.5D world: floor plans, exact RGB-D observation, noisy dynamics.

Geometry is a floor plan of zero-thickness vertical walls over 2D segments
plus convex polygonal obstacle prisms spanning floor to ceiling, with the
floor plane at z = 0 and the ceiling at the tallest wall. Observations are
analytic ray casts against that geometry, which makes them an oracle that is
independent of the voxel renderer.

Dynamics follow the clipped-noise model: turn and travel magnitudes get
Gaussian perturbations clipped at zero so an action's direction never
inverts, and the turn perturbation also tilts the travel direction. Noise is
only applied to motion that is actually commanded; both normal draws are
consumed every step regardless, so runs sharing a seed see identical noise
streams no matter which controls they issue. The optional quantizer mimics a
game engine that stores integer-degree headings and centimeter positions.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    AgentState,
    Control,
    ControlLimits,
    CameraIntrinsics,
    agent_to_camera,
    clamp_control,
    default_mount,
    pixel_unit_dirs,
    wrap_angle,
)
from .renderer import BG_GREY, RenderConfig, RgbdImage

DEFAULT_BODY_LENGTH = 0.2
DEFAULT_CAMERA_HEIGHT = 0.4
# One grey shared by floor, ceiling, and the generator's walls and boxes.
# Colour contrast feeds the map-learning colour term, whose pull on geometry
# is magnitude-blind under the Laplace model and five times the depth
# weight; a colour-uniform world keeps it exactly silent (see map_learning).
# The value sits on the 8-bit grid so PNG round-trips preserve it bit-exactly.
SURFACE_GREY = 140.0 / 255.0
FLOOR_RGB = (SURFACE_GREY, SURFACE_GREY, SURFACE_GREY)
CEILING_RGB = FLOOR_RGB

# task sampling margins, in units of body length
TASK_CLEARANCE = 1.2
TASK_SEPARATION = 3.0


class NoPlacementError(RuntimeError):
    """Rejection sampling could not place a pose/task in free space."""


@dataclass(frozen=True)
class Wall:
    a: tuple[float, float]
    b: tuple[float, float]
    height: float
    rgb: tuple[float, float, float]

    def __post_init__(self):
        if math.dist(self.a, self.b) < 1e-9:
            raise ValueError("degenerate wall segment")
        if self.height <= 0:
            raise ValueError("wall height must be positive")


@dataclass(frozen=True)
class Obstacle:
    poly: tuple[tuple[float, float], ...]
    rgb: tuple[float, float, float]

    def __post_init__(self):
        pts = np.asarray(self.poly, dtype=float)
        if len(pts) < 3:
            raise ValueError("obstacle polygon needs at least 3 vertices")
        e = np.roll(pts, -1, axis=0) - pts
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12) and np.any(cross > 1e-12):
            raise ValueError("obstacle polygon must be convex")
        if np.all(cross <= 0):  # normalize to counter-clockwise
            object.__setattr__(self, "poly", tuple(map(tuple, pts[::-1])))


@dataclass
class FloorPlan:
    body_length: float
    bbox: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    walls: list[Wall]
    obstacles: list[Obstacle]
    rooms: list[tuple[float, float, float, float]] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.body_length <= 0:
            raise ValueError("body length must be positive")
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise ValueError("bbox must have positive area")
        self._build_caches()

    def _build_caches(self):
        segs = [(w.a, w.b) for w in self.walls]
        for ob in self.obstacles:
            pts = list(ob.poly)
            segs.extend((pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts)))
        self._segments = np.asarray(segs, dtype=float).reshape(-1, 2, 2)
        self._ceiling = max((w.height for w in self.walls), default=1.0)

    @property
    def ceiling(self) -> float:
        return self._ceiling

    @property
    def limits(self) -> ControlLimits:
        return ControlLimits.for_body(self.body_length)


# ----------------------------------------------------------------- plan files


def save_floorplan(plan: FloorPlan, path) -> None:
    doc = {
        "body_length": plan.body_length,
        "bbox": list(plan.bbox),
        "walls": [
            {"a": list(w.a), "b": list(w.b), "height": w.height, "rgb": list(w.rgb)}
            for w in plan.walls
        ],
        "obstacles": [{"poly": [list(p) for p in ob.poly], "rgb": list(ob.rgb)} for ob in plan.obstacles],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def load_floorplan(path) -> FloorPlan:
    with open(path) as fh:
        doc = json.load(fh)
    return FloorPlan(
        body_length=float(doc["body_length"]),
        bbox=tuple(float(v) for v in doc["bbox"]),
        walls=[
            Wall(a=tuple(w["a"]), b=tuple(w["b"]), height=float(w["height"]), rgb=tuple(w["rgb"]))
            for w in doc["walls"]
        ],
        obstacles=[
            Obstacle(poly=tuple(tuple(p) for p in ob["poly"]), rgb=tuple(ob["rgb"]))
            for ob in doc["obstacles"]
        ],
    )


# -------------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class NoiseConfig:
    sigma_turn: float  # radians
    sigma_speed: float  # meters
    quantize: bool = True

    def __post_init__(self):
        if self.sigma_turn < 0 or self.sigma_speed < 0:
            raise ValueError("noise scales must be non-negative")


ZERO_NOISE = NoiseConfig(0.0, 0.0, quantize=False)

_PRESETS = {"high": (9.0, 0.30), "mid": (6.0, 0.15), "low": (3.0, 0.10)}


def noise_preset(name: str, body_length: float = DEFAULT_BODY_LENGTH) -> NoiseConfig:
    """Named noise level; speed scale given as a fraction of body length."""
    deg, frac = _PRESETS[name]
    return NoiseConfig(sigma_turn=math.radians(deg), sigma_speed=frac * body_length)


@dataclass(frozen=True)
class NavTask:
    start: AgentState
    target: tuple[float, float]


def _quantize(x: float, y: float, heading: float) -> tuple[float, float, float]:
    return round(x, 2), round(y, 2), math.radians(round(math.degrees(heading)))


def step_dynamics(s: AgentState, u: Control, noise: NoiseConfig, rng) -> AgentState:
    """One noisy kinematic step (pre-collision).

    Draw order is fixed: turn perturbation first, speed perturbation second.
    Both are drawn even when unused so seeded streams stay aligned.
    """
    eps_turn = rng.normal(0.0, noise.sigma_turn)
    eps_speed = rng.normal(0.0, noise.sigma_speed)

    heading = s.heading
    if u.turn != 0.0:
        heading += math.copysign(1.0, u.turn) * max(0.0, abs(u.turn) + eps_turn)
    x, y = s.x, s.y
    if u.speed > 0.0:
        travel = max(0.0, u.speed + eps_speed)
        ang = u.move_dir + eps_turn
        x += math.cos(ang) * travel
        y += math.sin(ang) * travel
    if noise.quantize:
        x, y, heading = _quantize(x, y, heading)
    return AgentState(x=x, y=y, heading=heading)


def mean_step(s: AgentState, u: Control) -> AgentState:
    """Noise-free, unquantized mean of the dynamics; the tracking prediction."""
    heading = s.heading + u.turn
    x, y = s.x, s.y
    if u.speed > 0.0:
        x += math.cos(u.move_dir) * u.speed
        y += math.sin(u.move_dir) * u.speed
    return AgentState(x=x, y=y, heading=heading)


# ------------------------------------------------------------------ collision


def _point_segment_dist(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Distances (N, S) from points (N, 2) to segments (S, 2, 2)."""
    pts = np.atleast_2d(pts)
    a, b = segs[:, 0], segs[:, 1]
    e = b - a
    ee = (e * e).sum(axis=1)
    t = ((pts[:, None, :] - a) * e).sum(axis=2) / ee
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * e
    return np.linalg.norm(pts[:, None, :] - closest, axis=2)


def _segments_intersect(p0, p1, segs) -> np.ndarray:
    """Whether segment p0-p1 properly intersects each of segs (S,)."""
    a, b = segs[:, 0], segs[:, 1]
    d = p1 - p0
    e = b - a

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    denom = cross(d, e)
    ok = np.abs(denom) > 1e-15
    t = np.where(ok, cross(a - p0, e) / np.where(ok, denom, 1.0), -1.0)
    u = np.where(ok, cross(a - p0, np.broadcast_to(d, e.shape)) / np.where(ok, denom, 1.0), -1.0)
    return ok & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)


def _segment_segment_dist(p0: np.ndarray, p1: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Exact 2D distances (S,) from segment p0-p1 to each scene segment.

    In the plane, two non-crossing segments attain their minimum distance at
    an endpoint of one of them, so four point-to-segment queries plus an
    intersection test are exact.
    """
    if len(segs) == 0:
        return np.zeros(0)
    if float(((p1 - p0) ** 2).sum()) == 0.0:
        # zero-length motion: the swept disc is a disc around one point
        return _point_segment_dist(p0[None, :], segs)[0]
    move = np.stack([p0, p1])[None, :, :]  # as a (1, 2, 2) segment array
    d = np.minimum(
        _point_segment_dist(np.stack([p0, p1]), segs).min(axis=0),
        _point_segment_dist(segs.reshape(-1, 2), move).reshape(-1, 2).min(axis=1),
    )
    return np.where(_segments_intersect(p0, p1, segs), 0.0, d)


def clearance(plan: FloorPlan, point) -> float:
    """Distance from a 2D point to the nearest wall/obstacle segment."""
    if len(plan._segments) == 0:
        return math.inf
    return float(_point_segment_dist(np.asarray(point, dtype=float), plan._segments).min())


def resolve_collision(plan: FloorPlan, frm, to, radius: float):
    """`to` if the swept disc stays clear of all geometry, else `frm`."""
    frm = np.asarray(frm, dtype=float)
    to = np.asarray(to, dtype=float)
    if len(plan._segments) == 0:
        return to.copy()
    d = _segment_segment_dist(frm, to, plan._segments)
    return frm.copy() if bool((d < radius).any()) else to.copy()


def simulate_step(plan: FloorPlan, s: AgentState, u: Control, noise: NoiseConfig, rng):
    """Clamp the control, apply noisy dynamics, then block colliding motion.

    Returns (new state, collided). A blocked step keeps the old position but
    the new heading: turning in place is not motion through space.
    """
    u = clamp_control(u, s.heading, plan.limits)
    nxt = step_dynamics(s, u, noise, rng)
    pos = resolve_collision(plan, (s.x, s.y), (nxt.x, nxt.y), plan.body_length / 2.0)
    collided = not (pos[0] == nxt.x and pos[1] == nxt.y)
    return AgentState(x=float(pos[0]), y=float(pos[1]), heading=nxt.heading), collided


# ---------------------------------------------------------------- observation


def observe(
    plan: FloorPlan,
    s: AgentState,
    K: CameraIntrinsics,
    cfg: RenderConfig,
    camera_height: float = DEFAULT_CAMERA_HEIGHT,
) -> RgbdImage:
    """Ground-truth RGB-D at the agent state, by analytic ray casting."""
    pose = agent_to_camera(s, default_mount(), camera_height)
    dirs = (pixel_unit_dirs(K).reshape(-1, 3) @ pose.r.T)
    o = pose.t
    m = len(dirs)
    t_best = np.full(m, np.inf)
    rgb = np.full((m, 3), BG_GREY)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]

    def commit(t, valid, colour):
        better = valid & (t < t_best)
        t_best[better] = t[better]
        rgb[better] = colour

    for w in plan.walls:
        a = np.asarray(w.a)
        e = np.asarray(w.b) - a
        denom = dx * e[1] - dy * e[0]
        ok = np.abs(denom) > 1e-15
        safe = np.where(ok, denom, 1.0)
        rel = a - o[:2]
        t = np.where(ok, (rel[0] * e[1] - rel[1] * e[0]) / safe, np.inf)
        u = (rel[0] * dy - rel[1] * dx) / safe
        z = o[2] + np.where(ok, t, 0.0) * dz
        commit(t, ok & (t > 1e-9) & (u >= 0.0) & (u <= 1.0) & (z >= 0.0) & (z <= w.height), w.rgb)

    for ob in plan.obstacles:
        pts = np.asarray(ob.poly)
        t_in = np.full(m, 1e-9)
        t_out = np.full(m, np.inf)
        feasible = np.ones(m, dtype=bool)
        for i in range(len(pts)):
            edge = pts[(i + 1) % len(pts)] - pts[i]
            n = np.array([edge[1], -edge[0]])  # outward for CCW
            c = n @ pts[i]
            den = n[0] * dx + n[1] * dy
            num = c - (n @ o[:2])
            par = np.abs(den) < 1e-15
            feasible &= ~(par & (num < 0.0))
            tt = num / np.where(par, 1.0, den)
            t_in = np.where(~par & (den < 0), np.maximum(t_in, tt), t_in)
            t_out = np.where(~par & (den > 0), np.minimum(t_out, tt), t_out)
        z = o[2] + t_in * dz
        hit = feasible & (t_in <= t_out) & np.isfinite(t_in) & (z >= 0.0) & (z <= plan.ceiling)
        commit(t_in, hit, ob.rgb)

    below = dz < -1e-15
    t_floor = np.where(below, -o[2] / np.where(below, dz, 1.0), np.inf)
    commit(t_floor, below & (t_floor > 1e-9), FLOOR_RGB)

    above = dz > 1e-15
    t_ceil = np.where(above, (plan.ceiling - o[2]) / np.where(above, dz, 1.0), np.inf)
    commit(t_ceil, above & (t_ceil > 1e-9), CEILING_RGB)

    missed = t_best > cfg.max_range
    t_best[missed] = cfg.max_range
    rgb[missed] = BG_GREY
    return RgbdImage(
        rgb=rgb.reshape(K.height, K.width, 3),
        depth=t_best.reshape(K.height, K.width),
        intrinsics=K,
    )


# ------------------------------------------------------------------- sampling


def sample_free_states(plan: FloorPlan, count: int, rng, min_clearance=None, max_tries=20000):
    """Uniform collision-free agent states inside the bounding box."""
    need = plan.body_length / 2.0 if min_clearance is None else min_clearance
    x0, y0, x1, y1 = plan.bbox
    out = []
    for _ in range(max_tries):
        if len(out) == count:
            return out
        x = rng.uniform(x0, x1)
        y = rng.uniform(y0, y1)
        heading = rng.uniform(-math.pi, math.pi)
        if clearance(plan, (x, y)) >= need:
            out.append(AgentState(x=x, y=y, heading=heading))
    raise NoPlacementError(f"placed {len(out)}/{count} poses in {max_tries} tries")


def sample_tasks(plan: FloorPlan, count: int, rng, max_tries=20000) -> list[NavTask]:
    """Start/target pairs honoring the clearance and separation margins."""
    need = TASK_CLEARANCE * plan.body_length
    apart = TASK_SEPARATION * plan.body_length
    x0, y0, x1, y1 = plan.bbox
    out = []
    for _ in range(max_tries):
        if len(out) == count:
            return out
        sx, sy, tx, ty = rng.uniform((x0, y0, x0, y0), (x1, y1, x1, y1))
        if math.dist((sx, sy), (tx, ty)) <= apart:
            continue
        if clearance(plan, (sx, sy)) < need or clearance(plan, (tx, ty)) < need:
            continue
        heading = rng.uniform(-math.pi, math.pi)
        out.append(NavTask(start=AgentState(x=sx, y=sy, heading=heading), target=(tx, ty)))
    raise NoPlacementError(f"placed {len(out)}/{count} tasks in {max_tries} tries")


# ------------------------------------------------------------ plan generation


@dataclass(frozen=True)
class WorldSpec:
    width: float = 8.0
    height: float = 8.0
    room_range: tuple[int, int] = (3, 6)
    boxes_per_room: tuple[int, int] = (1, 3)
    body_length: float = DEFAULT_BODY_LENGTH
    wall_height: float = 1.0
    door_width: float = 0.9
    min_room: float = 2.0

    def __post_init__(self):
        if self.width <= 2 * self.min_room and self.height <= 2 * self.min_room:
            raise ValueError("extents too small to partition")
        if self.room_range[0] < 1 or self.room_range[1] < self.room_range[0]:
            raise ValueError("bad room range")


def _palette(rng) -> tuple[float, float, float]:
    # every surface the same grey as floor and ceiling: colour-uniform worlds
    # learn clean geometry (see SURFACE_GREY). rng stays in the signature so
    # a decorative palette can be swapped back in without touching callers.
    del rng
    return FLOOR_RGB


def _split_rooms(spec: WorldSpec, n_rooms: int, rng):
    """Recursive partition; returns (room rects, interior walls with door gaps)."""
    rooms = [(0.0, 0.0, spec.width, spec.height)]
    walls = []
    while len(rooms) < n_rooms:
        areas = [(r[2] - r[0]) * (r[3] - r[1]) for r in rooms]
        i = int(np.argmax(areas))
        x0, y0, x1, y1 = rooms[i]
        horiz = (x1 - x0) >= (y1 - y0)  # split the longer axis
        span = (x1 - x0) if horiz else (y1 - y0)
        if span < 2 * spec.min_room:
            break
        cut = rng.uniform(spec.min_room, span - spec.min_room)
        lo = rng.uniform(0.15, 0.85)  # door position along the new wall
        if horiz:
            x = x0 + cut
            door = y0 + lo * (y1 - y0 - spec.door_width)
            walls.append(((x, y0), (x, door)))
            walls.append(((x, door + spec.door_width), (x, y1)))
            rooms[i : i + 1] = [(x0, y0, x, y1), (x, y0, x1, y1)]
        else:
            y = y0 + cut
            door = x0 + lo * (x1 - x0 - spec.door_width)
            walls.append(((x0, y), (door, y)))
            walls.append(((door + spec.door_width, y), (x1, y)))
            rooms[i : i + 1] = [(x0, y0, x1, y), (x0, y, x1, y1)]
    return rooms, walls


def _free_space_connected(plan: FloorPlan, need: float) -> bool:
    """Flood fill over a conservative occupancy raster of the free space."""
    step = plan.body_length * 0.6
    margin = need + step * 0.75
    x0, y0, x1, y1 = plan.bbox
    nx = int((x1 - x0) / step) + 1
    ny = int((y1 - y0) / step) + 1
    xs = x0 + (np.arange(nx) + 0.5) * step
    ys = y0 + (np.arange(ny) + 0.5) * step
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    free = (_point_segment_dist(pts, plan._segments).min(axis=1) >= margin).reshape(nx, ny)
    if not free.any():
        return False
    seeds = np.argwhere(free)
    stack = [tuple(seeds[0])]
    seen = np.zeros_like(free)
    seen[tuple(seeds[0])] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < nx and 0 <= b < ny and free[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    return bool((seen == free).all())


def generate_floorplan(seed: int, spec: WorldSpec = WorldSpec()) -> FloorPlan:
    """Procedural multi-room plan; retries internally until connected."""
    root = np.random.SeedSequence(seed)
    for child in root.spawn(100):
        rng = np.random.default_rng(child)
        n_rooms = int(rng.integers(spec.room_range[0], spec.room_range[1] + 1))
        rooms, interior = _split_rooms(spec, n_rooms, rng)

        walls = []
        w, h = spec.width, spec.height
        for a, b in (((0, 0), (w, 0)), ((w, 0), (w, h)), ((w, h), (0, h)), ((0, h), (0, 0))):
            walls.append(Wall(a=a, b=b, height=spec.wall_height, rgb=_palette(rng)))
        for a, b in interior:
            if math.dist(a, b) > 1e-9:
                walls.append(Wall(a=a, b=b, height=spec.wall_height, rgb=_palette(rng)))

        obstacles = []
        for x0, y0, x1, y1 in rooms:
            for _ in range(int(rng.integers(spec.boxes_per_room[0], spec.boxes_per_room[1] + 1))):
                half = rng.uniform(0.12, 0.3)
                margin = half + 3.5 * spec.body_length
                if x1 - x0 < 2 * margin or y1 - y0 < 2 * margin:
                    continue
                cx = rng.uniform(x0 + margin, x1 - margin)
                cy = rng.uniform(y0 + margin, y1 - margin)
                ang = rng.uniform(0, math.pi / 2)
                ca, sa = math.cos(ang), math.sin(ang)
                corners = [
                    (cx + ca * dx_ - sa * dy_, cy + sa * dx_ + ca * dy_)
                    for dx_, dy_ in ((-half, -half), (half, -half), (half, half), (-half, half))
                ]
                obstacles.append(Obstacle(poly=tuple(corners), rgb=_palette(rng)))

        plan = FloorPlan(
            body_length=spec.body_length,
            bbox=(0.0, 0.0, w, h),
            walls=walls,
            obstacles=obstacles,
            rooms=rooms,
        )
        if _free_space_connected(plan, TASK_CLEARANCE * spec.body_length):
            return plan
    raise RuntimeError("could not generate a connected plan")

"""Experiment drivers and metrics.

This module closes the loop around the other components: it runs navigation
episodes (observe, track, control, step), scores them with SPL and pose
RMSE, benchmarks per-step runtimes, and serializes results as CSV, JSONL
and SVG plots.

Success is judged on the true final position, never the estimate; path
length is the sum of realized true displacements; the optimal length comes
from the same A* machinery run on a fine lattice rasterized from the
ground-truth floor plan rather than the learned map. Paired comparisons
rely on the simulator consuming an identical number of noise draws per
step regardless of the control, so two methods given the same seed face
the same disturbance stream until their trajectories diverge.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import AgentState, CameraIntrinsics, ControlLimits, agent_to_camera, default_mount, wrap_angle
from .planning import NoPathError, PlanConfig, Waypoints, astar_plan, next_control, plan_route
from .renderer import RenderConfig, render_rgbd
from .simulator import (
    DEFAULT_BODY_LENGTH,
    DEFAULT_CAMERA_HEIGHT,
    FloorPlan,
    NavTask,
    NoiseConfig,
    observe,
    sample_free_states,
    simulate_step,
)
from .tracking import (
    baseline_config,
    dynamics_track_step,
    emission_track_step,
    init_dynamics_tracker,
    init_no_map_tracker,
    init_tracker,
    no_map_track_step,
    track_step,
    tracker_config_for,
)
from .voxel_map import EmissionScales, VoxelMap, occupancy_slice

TRACKER_KINDS = ("ours", "no_map", "dynamics_only", "emission")

RESULTS_HEADER = [
    "env", "task", "method", "noise", "success", "p_len", "l_len",
    "spl_term", "loc_rmse", "ori_rmse", "steps", "seconds_per_step",
]
TRACKING_HEADER = ["traj_id", "seed", "loc_rmse_m", "ori_rmse_rad", "mean_step_seconds"]
RUNTIME_HEADER = ["component", "mean_s", "std_s", "trials"]


@dataclass(frozen=True)
class EpisodeConfig:
    """Shared knobs for episode execution (camera, renderer, controller)."""

    intrinsics: CameraIntrinsics = CameraIntrinsics(30.0, 32.0, 24.0, 64, 48)
    render: RenderConfig = RenderConfig(step=0.1, n_steps=80, tau=0.5)
    body_length: float = DEFAULT_BODY_LENGTH
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    replan_patience: int = 50
    # (name, value) overrides applied to the per-noise TrackerConfig;
    # experiments leave this empty, tests shrink the optimizer with it
    tracker_overrides: tuple = ()

    @property
    def plan_config(self) -> PlanConfig:
        return PlanConfig.for_body(self.body_length, tau=self.render.tau)

    @property
    def limits(self) -> ControlLimits:
        return ControlLimits.for_body(self.body_length)


@dataclass(frozen=True)
class NavResult:
    task_id: str
    success: bool
    p_len: float
    l_len: float
    steps: int
    final_dist: float
    note: str = ""

    def __post_init__(self):
        if self.p_len < 0.0:
            raise ValueError("path length must be non-negative")
        if not self.l_len > 0.0:
            raise ValueError("optimal length must be positive")

    @property
    def spl_term(self) -> float:
        return self.success * self.l_len / max(self.p_len, self.l_len)


@dataclass
class TrajectoryRecord:
    """Per-step log of an episode; all lists advance in lockstep."""

    true_states: list = field(default_factory=list)
    est_states: list = field(default_factory=list)
    track_seconds: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    collisions: list = field(default_factory=list)

    def append(self, truth, est, dt, u, collided):
        self.true_states.append(truth)
        self.est_states.append(est)
        self.track_seconds.append(float(dt))
        self.controls.append(u)
        self.collisions.append(bool(collided))

    def __len__(self) -> int:
        n = len(self.true_states)
        assert all(
            len(lst) == n
            for lst in (self.est_states, self.track_seconds, self.controls, self.collisions)
        )
        return n

    @property
    def timestamps(self) -> np.ndarray:
        return np.cumsum(self.track_seconds)


# ----------------------------------------------------------------- metrics


def spl(results) -> float:
    """Mean of s_i * l_i / max(p_i, l_i) over the task list."""
    results = list(results)
    if not results:
        raise ValueError("SPL of an empty result list")
    return float(sum(r.spl_term for r in results) / len(results))


def rmse(rec: TrajectoryRecord) -> tuple[float, float]:
    """Root-mean-square planar position error and wrapped heading error."""
    if len(rec) == 0:
        raise ValueError("RMSE of an empty trajectory")
    t = np.array([(s.x, s.y, s.heading) for s in rec.true_states])
    e = np.array([(s.x, s.y, s.heading) for s in rec.est_states])
    d = e[:, :2] - t[:, :2]
    loc = math.sqrt(float(np.mean(d[:, 0] ** 2 + d[:, 1] ** 2)))
    ori = math.sqrt(float(np.mean(wrap_angle(e[:, 2] - t[:, 2]) ** 2)))
    return loc, ori


# ------------------------------------------------------- ground-truth length


def rasterize_plan(plan: FloorPlan, cell: float) -> VoxelMap:
    """Binary occupancy of the floor plan on a fine node lattice.

    A node is occupied when it lies within half a cell of any wall or
    obstacle edge, or inside an obstacle polygon. The grid is flat in z
    (two identical layers), which is all planning needs.
    """
    x0, y0, x1, y1 = plan.bbox
    nx = int(math.ceil((x1 - x0) / cell)) + 3
    ny = int(math.ceil((y1 - y0) / cell)) + 3
    origin = np.array([x0 - cell, y0 - cell, 0.0])
    xs = origin[0] + np.arange(nx) * cell
    ys = origin[1] + np.arange(ny) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    occupied = np.zeros(len(pts), dtype=bool)
    segs = plan._segments
    if len(segs):
        from .simulator import _point_segment_dist

        occupied |= _point_segment_dist(pts, segs).min(axis=1) <= 0.5 * cell
    for ob in plan.obstacles:
        poly = np.asarray(ob.poly, dtype=float)
        inside = np.ones(len(pts), dtype=bool)
        for a, b in zip(poly, np.roll(poly, -1, axis=0)):
            e = b - a
            inside &= e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0]) >= 0.0
        occupied |= inside

    occ = occupied.astype(float).reshape(nx, ny)[:, :, None].repeat(2, axis=2)
    col = np.full(occ.shape + (3,), 0.5)
    return VoxelMap(
        occ=occ,
        col=col,
        origin=origin,
        cell=np.array([cell, cell, max(plan.ceiling, 1.0)]),
        scales=EmissionScales(sigma_rgb=1.0, sigma_depth=1.0),
    )


def ground_truth_plan_config(body_length: float) -> PlanConfig:
    # quarter-body lattice; short edges need far fewer sight samples
    base = PlanConfig.for_body(body_length)
    return replace(base, step=0.25 * body_length, los_samples=12)


def optimal_path_length(plan: FloorPlan, start, target, body_length: float) -> float:
    """Shortest-path length on a fine lattice over the true floor plan."""
    cfg = ground_truth_plan_config(body_length)
    gt_map = rasterize_plan(plan, cell=cfg.step)
    sl = occupancy_slice(gt_map, 0.5 * gt_map.cell[2], cfg.tau)
    wp = astar_plan(sl, gt_map, (start[0], start[1]), (target[0], target[1]), cfg)
    # measure to the target itself, not just to the lattice exit node
    tail = float(np.linalg.norm(np.asarray(target, float) - wp.points[-1]))
    return max(wp.total_cost + tail, 1e-9)


# ----------------------------------------------------------------- episodes


def _init_filter(kind, state, plan, vmap, tcfg, ecfg):
    if kind == "ours":
        return init_tracker(state, vmap, ecfg.intrinsics, tcfg, ecfg.render)
    if kind == "no_map":
        obs0 = observe(plan, state, ecfg.intrinsics, ecfg.render, ecfg.camera_height)
        return init_no_map_tracker(state, obs0, tcfg, ecfg.render)
    if kind in ("dynamics_only", "emission"):
        return init_dynamics_tracker(state)
    raise ValueError(f"unknown tracker kind {kind!r}")


def run_episode(
    plan: FloorPlan,
    vmap: VoxelMap,
    task: NavTask,
    noise: NoiseConfig,
    tracker_kind: str,
    seed: int,
    max_steps: int | None = None,
    *,
    ecfg: EpisodeConfig | None = None,
    optimal_len: float | None = None,
    control_from_truth: bool = False,
    task_id: str | None = None,
) -> tuple[NavResult, TrajectoryRecord]:
    """One closed-loop navigation episode.

    The controller consumes the tracker's estimate (or the true state when
    ``control_from_truth`` is set, which turns navigation into a pure
    tracking benchmark on the same trajectory distribution). Component
    failures end the episode and are recorded on the NavResult, not thrown.
    """
    if tracker_kind not in TRACKER_KINDS:
        raise ValueError(f"unknown tracker kind {tracker_kind!r}")
    ecfg = ecfg or EpisodeConfig()
    tcfg = tracker_config_for(noise, **dict(ecfg.tracker_overrides))
    if tracker_kind == "emission":
        tcfg = baseline_config(tcfg)
    target = np.asarray(task.target, dtype=float)
    l_len = optimal_len if optimal_len is not None else optimal_path_length(
        plan, (task.start.x, task.start.y), target, ecfg.body_length
    )
    if max_steps is None:
        max_steps = int(math.ceil(10.0 * l_len / ecfg.limits.max_speed))
    if task_id is None:
        task_id = f"{task.start.x:.2f},{task.start.y:.2f}->{target[0]:.2f},{target[1]:.2f}"

    rng = np.random.default_rng(seed)
    truth = task.start
    est = task.start
    fs = _init_filter(tracker_kind, est, plan, vmap, tcfg, ecfg)
    rec = TrajectoryRecord()
    note = ""

    pcfg = ecfg.plan_config
    try:
        wp = plan_route(vmap, (est.x, est.y), target, pcfg, ecfg.camera_height)
    except NoPathError as err:
        note = f"plan: {err}"
        wp = Waypoints.empty()

    best = float(np.linalg.norm([est.x - target[0], est.y - target[1]]))
    stall = 0
    while len(rec) < max_steps and not note:
        pilot = truth if control_from_truth else est
        u, wp = next_control(pilot, wp, ecfg.limits, pcfg)
        if u is None:
            break
        truth, collided = simulate_step(plan, truth, u, noise, rng)

        if tracker_kind == "dynamics_only":
            t0 = time.perf_counter()
            est, fs = dynamics_track_step(fs, u)
            dt = time.perf_counter() - t0
        else:
            obs = observe(plan, truth, ecfg.intrinsics, ecfg.render, ecfg.camera_height)
            t0 = time.perf_counter()
            if tracker_kind == "ours":
                est, fs = track_step(fs, u, obs, vmap, tcfg, ecfg.render)
            elif tracker_kind == "no_map":
                est, fs = no_map_track_step(fs, u, obs, tcfg, ecfg.render)
            else:
                est, fs = emission_track_step(fs, u, obs, vmap, tcfg, ecfg.render)
            dt = time.perf_counter() - t0
        rec.append(truth, est, dt, u, collided)

        dist_est = float(np.linalg.norm([est.x - target[0], est.y - target[1]]))
        if dist_est < best - 1e-9:
            best, stall = dist_est, 0
        else:
            stall += 1
        if fs.failed or stall >= ecfg.replan_patience:
            stall = 0
            try:
                wp = plan_route(vmap, (est.x, est.y), target, pcfg, ecfg.camera_height)
            except NoPathError as err:
                note = f"replan: {err}"

    final_dist = float(np.linalg.norm([truth.x - target[0], truth.y - target[1]]))
    t_arr = np.array([(s.x, s.y) for s in [task.start, *rec.true_states]])
    p_len = float(np.linalg.norm(np.diff(t_arr, axis=0), axis=1).sum())
    result = NavResult(
        task_id=task_id,
        success=final_dist < 2.0 * ecfg.body_length,
        p_len=p_len,
        l_len=l_len,
        steps=len(rec),
        final_dist=final_dist,
        note=note,
    )
    return result, rec


# ------------------------------------------------------- experiment drivers


def _nav_row(env, task_id, method, noise_name, result, rec):
    if len(rec):
        loc, ori = rmse(rec)
        sec = float(np.mean(rec.track_seconds))
    else:
        loc = ori = sec = float("nan")
    return {
        "env": env,
        "task": task_id,
        "method": method,
        "noise": noise_name,
        "success": int(result.success),
        "p_len": result.p_len,
        "l_len": result.l_len,
        "spl_term": result.spl_term,
        "loc_rmse": loc,
        "ori_rmse": ori,
        "steps": result.steps,
        "seconds_per_step": sec,
    }


_WORKER_CTX: dict = {}


def _episode_worker_init(plan, vmap, noise, ecfg):
    _WORKER_CTX.update(plan=plan, vmap=vmap, noise=noise, ecfg=ecfg)


def _episode_worker(payload):
    env, idx, task, method, noise_name, seed, l_len = payload
    result, rec = run_episode(
        _WORKER_CTX["plan"],
        _WORKER_CTX["vmap"],
        task,
        _WORKER_CTX["noise"],
        method,
        seed,
        ecfg=_WORKER_CTX["ecfg"],
        optimal_len=l_len,
        task_id=str(idx),
    )
    return _nav_row(env, str(idx), method, noise_name, result, rec), result


def evaluate_navigation(
    plan: FloorPlan,
    vmap: VoxelMap,
    tasks,
    noise: NoiseConfig,
    methods,
    *,
    env: str = "env0",
    noise_name: str = "custom",
    seed0: int = 0,
    ecfg: EpisodeConfig | None = None,
    jobs: int = 1,
):
    """Paired evaluation: every method sees the same tasks and seeds.

    Returns (csv_rows, {method: [NavResult, ...]}).
    """
    ecfg = ecfg or EpisodeConfig()
    lengths = [
        optimal_path_length(plan, (t.start.x, t.start.y), t.target, ecfg.body_length)
        for t in tasks
    ]
    payloads = [
        (env, i, task, m, noise_name, seed0 + i, lengths[i])
        for m in methods
        for i, task in enumerate(tasks)
    ]
    rows: list[dict] = []
    per_method: dict[str, list[NavResult]] = {m: [] for m in methods}
    if jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(
            max_workers=jobs,
            mp_context=ctx,
            initializer=_episode_worker_init,
            initargs=(plan, vmap, noise, ecfg),
        ) as pool:
            for payload, (row, result) in zip(payloads, pool.map(_episode_worker, payloads)):
                rows.append(row)
                per_method[payload[3]].append(result)
    else:
        _episode_worker_init(plan, vmap, noise, ecfg)
        for payload in payloads:
            row, result = _episode_worker(payload)
            rows.append(row)
            per_method[payload[3]].append(result)
    return rows, per_method


def _tracking_worker(payload):
    i, task, seed, method = payload
    _, rec = run_episode(
        _WORKER_CTX["plan"],
        _WORKER_CTX["vmap"],
        task,
        _WORKER_CTX["noise"],
        method,
        seed,
        ecfg=_WORKER_CTX["ecfg"],
        control_from_truth=True,
        task_id=str(i),
    )
    if len(rec) == 0:  # episode never started (e.g. no plan on this map)
        loc = ori = dt = float("nan")
    else:
        loc, ori = rmse(rec)
        dt = float(np.mean(rec.track_seconds))
    return {
        "traj_id": i,
        "seed": seed,
        "loc_rmse_m": loc,
        "ori_rmse_rad": ori,
        "mean_step_seconds": dt,
    }


def evaluate_tracking(
    plan: FloorPlan,
    vmap: VoxelMap,
    n_trajectories: int,
    seeds_per: int,
    noise: NoiseConfig,
    method: str = "ours",
    *,
    tasks=None,
    ecfg: EpisodeConfig | None = None,
    task_seed: int = 0,
    jobs: int = 1,
):
    """Tracking benchmark: ground-truth pilot, per-(trajectory, seed) RMSE.

    Returns rows for the tracking CSV schema.
    """
    from .simulator import sample_tasks

    ecfg = ecfg or EpisodeConfig()
    if tasks is None:
        tasks = sample_tasks(plan, n_trajectories, np.random.default_rng(task_seed))
    payloads = [
        (i, task, seed, method)
        for i, task in enumerate(tasks)
        for seed in range(seeds_per)
    ]
    if jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(
            max_workers=jobs,
            mp_context=ctx,
            initializer=_episode_worker_init,
            initargs=(plan, vmap, noise, ecfg),
        ) as pool:
            return list(pool.map(_tracking_worker, payloads))
    _episode_worker_init(plan, vmap, noise, ecfg)
    return [_tracking_worker(p) for p in payloads]


def bench_runtimes(
    plan: FloorPlan,
    vmap: VoxelMap,
    trials: int = 30,
    *,
    ecfg: EpisodeConfig | None = None,
    seed: int = 0,
):
    """Wall-time table over identical inputs, serial on purpose."""
    ecfg = ecfg or EpisodeConfig()
    rng = np.random.default_rng(seed)
    state = sample_free_states(plan, 1, rng)[0]
    pose = agent_to_camera(state, default_mount(), ecfg.camera_height)
    tcfg = tracker_config_for(NoiseConfig(sigma_turn=math.radians(3.0), sigma_speed=0.02))
    obs = observe(plan, state, ecfg.intrinsics, ecfg.render, ecfg.camera_height)
    from .geometry import Control

    u = Control(turn=0.0, move_dir=state.heading, speed=0.0)
    fs_ours = init_tracker(state, vmap, ecfg.intrinsics, tcfg, ecfg.render)
    fs_dyn = init_dynamics_tracker(state)

    def timed(fn):
        fn()  # warm caches before the clock starts
        out = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
        return out

    samples = {
        "voxel_render": timed(lambda: render_rgbd(vmap, pose, ecfg.intrinsics, ecfg.render)),
        "track_step": timed(lambda: track_step(fs_ours, u, obs, vmap, tcfg, ecfg.render)),
        "emission_track_step": timed(
            lambda: emission_track_step(fs_dyn, u, obs, vmap, baseline_config(tcfg), ecfg.render)
        ),
    }

    pcfg = ecfg.plan_config
    wp = Waypoints.from_points([(state.x, state.y)])

    def pipeline():
        next_control(state, wp, ecfg.limits, pcfg)
        simulate_step(plan, state, u, NoiseConfig(0.0, 0.0, quantize=False), np.random.default_rng(0))
        o = observe(plan, state, ecfg.intrinsics, ecfg.render, ecfg.camera_height)
        track_step(fs_ours, u, o, vmap, tcfg, ecfg.render)

    samples["pipeline_step"] = timed(pipeline)
    return [
        {
            "component": name,
            "mean_s": float(np.mean(ts)),
            "std_s": float(np.std(ts)),
            "trials": trials,
        }
        for name, ts in samples.items()
    ]


# ------------------------------------------------------------ serialization


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, header, rows) -> None:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in header})
    _atomic_write_text(path, buf.getvalue())


def write_results_csv(path: str, rows) -> None:
    _write_csv(path, RESULTS_HEADER, rows)


def write_tracking_csv(path: str, rows) -> None:
    _write_csv(path, TRACKING_HEADER, rows)


def write_runtime_csv(path: str, rows) -> None:
    _write_csv(path, RUNTIME_HEADER, rows)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_episode_jsonl(path: str, rec: TrajectoryRecord) -> None:
    lines = []
    for t in range(len(rec)):
        s, e, u = rec.true_states[t], rec.est_states[t], rec.controls[t]
        lines.append(
            json.dumps(
                {
                    "t": t,
                    "state_true": [s.x, s.y, s.heading],
                    "state_est": [e.x, e.y, e.heading],
                    "control": [u.turn, u.move_dir, u.speed],
                    "collision": rec.collisions[t],
                }
            )
        )
    _atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# ------------------------------------------------------------------- plots


def _mpl():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_spl_bars(rows, path: str) -> None:
    """Mean SPL per (method, noise) group from results-CSV rows."""
    plt = _mpl()
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((str(r["method"]), str(r["noise"])), []).append(float(r["spl_term"]))
    keys = sorted(groups)
    vals = [np.mean(groups[k]) for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(keys)), 3.2))
    ax.bar(range(len(keys)), vals, color="#4878b0")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels([f"{m}\n{n}" for m, n in keys], fontsize=8)
    ax.set_ylabel("SPL")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_rmse_cdf(rows, path: str, loc_key: str = "loc_rmse_m", ori_key: str = "ori_rmse_rad") -> None:
    """Empirical CDFs of location and orientation RMSE."""
    plt = _mpl()
    loc = np.sort([float(r[loc_key]) for r in rows])
    ori = np.degrees(np.sort([float(r[ori_key]) for r in rows]))
    frac = np.arange(1, len(loc) + 1) / len(loc)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3))
    ax1.plot(loc, frac, drawstyle="steps-post")
    ax1.set_xlabel("location RMSE [m]")
    ax1.set_ylabel("fraction of runs")
    ax2.plot(ori, frac, drawstyle="steps-post", color="#b04848")
    ax2.set_xlabel("orientation RMSE [deg]")
    for ax in (ax1, ax2):
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_runtime_bars(rows, path: str) -> None:
    plt = _mpl()
    names = [str(r["component"]) for r in rows]
    means = [float(r["mean_s"]) for r in rows]
    stds = [float(r["std_s"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names)), 3.2))
    ax.bar(range(len(names)), means, yerr=stds, color="#60a060", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8, rotation=20)
    ax.set_ylabel("seconds / call")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_topdown(plan: FloorPlan, rec: TrajectoryRecord, target, path: str, wp: Waypoints | None = None) -> None:
    """Top-down view: walls, obstacles, true and estimated trajectories."""
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5, 5))
    for w in plan.walls:
        ax.plot([w.a[0], w.b[0]], [w.a[1], w.b[1]], color="#303030", lw=2)
    for ob in plan.obstacles:
        poly = np.asarray(ob.poly)
        ax.fill(poly[:, 0], poly[:, 1], color="#a0a0a0")
    if wp is not None and len(wp):
        ax.plot(wp.points[:, 0], wp.points[:, 1], "x--", color="#808080", lw=0.8, ms=4)
    if len(rec):
        t = np.array([(s.x, s.y) for s in rec.true_states])
        e = np.array([(s.x, s.y) for s in rec.est_states])
        ax.plot(t[:, 0], t[:, 1], color="#2060c0", lw=1.5, label="true")
        ax.plot(e[:, 0], e[:, 1], color="#c06020", lw=1.0, ls=":", label="estimate")
        ax.legend(fontsize=8)
    ax.plot([target[0]], [target[1]], "o", color="#208020", ms=8)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

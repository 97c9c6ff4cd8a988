"""Command-line front end.

One binary, six subcommands covering the full experiment pipeline:

    voxnav gen-world  --seed 0 --out runs/w0
    voxnav capture    --plan runs/w0/world.json --count 200 --out runs/cap0
    voxnav learn      --dataset runs/cap0/dataset --plan runs/w0/world.json --out runs/map0
    voxnav track-eval --plan ... --map runs/map0/map.vxnm --out runs/trk0
    voxnav navigate   --plan ... --map ... --method ours --noise low --out runs/nav0
    voxnav bench      --plan ... --map ... --out runs/bench0

Every run writes a `config.json` snapshot of its resolved parameters into
the output directory before doing any work, so any artifact can be traced
back to, and regenerated from, the exact invocation that produced it.

Exit codes: 0 success, 2 bad configuration or flags, 3 I/O failure,
4 algorithmic failure (no free space, unreachable goal, failed runtime
assertion). The VOXNAV_THREADS environment variable overrides --jobs.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evaluation import (
    EpisodeConfig,
    bench_runtimes,
    evaluate_navigation,
    evaluate_tracking,
    plot_rmse_cdf,
    plot_runtime_bars,
    plot_topdown,
    run_episode,
    spl,
    write_results_csv,
    write_runtime_csv,
    write_tracking_csv,
)
from .geometry import agent_to_camera, default_mount
from .map_learning import (
    MapBounds,
    PosedDataset,
    TrainConfig,
    learn_map,
    load_dataset,
    save_dataset,
)
from .planning import NoPathError
from .simulator import (
    NoiseConfig,
    NoPlacementError,
    WorldSpec,
    clearance,
    generate_floorplan,
    load_floorplan,
    noise_preset,
    observe,
    sample_free_states,
    sample_tasks,
    save_floorplan,
)
from .voxel_map import load_map, save_map

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ALGO = 4

# CLI spelling -> internal tracker kind
METHOD_NAMES = {
    "ours": "ours",
    "no-map": "no_map",
    "dynamics": "dynamics_only",
    "emission": "emission",
}


class ConfigError(ValueError):
    """Bad flag value or inconsistent parameters."""


@dataclass(frozen=True)
class RunConfig:
    """Snapshot of one resolved invocation, written as config.json."""

    subcommand: str
    seed: int
    out: str
    params: dict

    def write(self) -> None:
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, "config.json")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def load_run_config(out_dir) -> RunConfig:
    with open(os.path.join(out_dir, "config.json")) as fh:
        doc = json.load(fh)
    return RunConfig(**doc)


# ------------------------------------------------------------ flag parsing


def parse_noise(text: str, body_length: float) -> tuple[str, NoiseConfig]:
    """Decode --noise. Custom form is `custom:<deg>,<m>` (turn stdev in
    degrees, speed stdev in meters)."""
    if text in ("high", "mid", "low"):
        return text, noise_preset(text, body_length)
    if text.startswith("custom:"):
        parts = text[len("custom:"):].split(",")
        if len(parts) != 2:
            raise ConfigError("custom noise needs two values: custom:<deg>,<m>")
        try:
            deg, sigma_s = float(parts[0]), float(parts[1])
        except ValueError as err:
            raise ConfigError(f"bad custom noise numbers: {text!r}") from err
        if deg < 0 or sigma_s < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        return "custom", NoiseConfig(sigma_turn=math.radians(deg), sigma_speed=sigma_s)
    raise ConfigError(f"unknown noise preset {text!r} (high|mid|low|custom:<deg>,<m>)")


def parse_method(text: str) -> str:
    if text not in METHOD_NAMES:
        raise ConfigError(f"unknown method {text!r} (choose from {'|'.join(METHOD_NAMES)})")
    return METHOD_NAMES[text]


def parse_pair(text: str, name: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        lo, hi = (int(p) for p in parts)
    except ValueError as err:
        raise ConfigError(f"--{name} expects two integers like 3,6") from err
    return lo, hi


def resolve_jobs(flag_value: int) -> int:
    env = os.environ.get("VOXNAV_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError as err:
            raise ConfigError(f"VOXNAV_THREADS must be an integer, got {env!r}") from err
        if value < 1:
            raise ConfigError("VOXNAV_THREADS must be >= 1")
        return value
    if flag_value < 1:
        raise ConfigError("--jobs must be >= 1")
    return flag_value


def _snapshot(args: argparse.Namespace, **extra) -> RunConfig:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "seed", "out")}
    params.update(extra)
    cfg = RunConfig(subcommand=args.subcommand, seed=args.seed, out=args.out, params=params)
    cfg.write()
    return cfg


# ------------------------------------------------------------- subcommands


def cmd_gen_world(args) -> int:
    spec = WorldSpec(
        width=args.width,
        height=args.height,
        room_range=parse_pair(args.rooms, "rooms"),
        boxes_per_room=parse_pair(args.boxes, "boxes"),
        body_length=args.body,
    )
    _snapshot(args)
    plan = generate_floorplan(args.seed, spec)
    out = Path(args.out)
    save_floorplan(plan, out / "world.json")

    # Monte-Carlo free-space fraction at body radius
    rng = np.random.default_rng(args.seed)
    x0, y0, x1, y1 = plan.bbox
    pts = rng.uniform((x0, y0), (x1, y1), size=(4000, 2))
    free = np.fromiter(
        (clearance(plan, p) > plan.body_length / 2 for p in pts), dtype=bool, count=len(pts)
    )
    print(f"world: {x1 - x0:.1f} x {y1 - y0:.1f} m, {len(plan.rooms)} rooms, "
          f"{len(plan.walls)} walls, {len(plan.obstacles)} obstacles")
    print(f"free space: {free.mean():.1%} of bounding box at body radius")
    print(f"wrote {out / 'world.json'}")
    return EXIT_OK


def cmd_capture(args) -> int:
    plan = load_floorplan(args.plan)
    _snapshot(args)
    ecfg = EpisodeConfig(camera_height=args.camera_height)
    rng = np.random.default_rng(args.seed)
    states = sample_free_states(plan, args.count, rng)
    items = []
    for state in states:
        img = observe(plan, state, ecfg.intrinsics, ecfg.render, args.camera_height)
        pose = agent_to_camera(state, default_mount(), args.camera_height)
        items.append((img, pose))
    out = Path(args.out)
    save_dataset(PosedDataset(items), out / "dataset")
    print(f"captured {len(items)} posed views -> {out / 'dataset'}")
    return EXIT_OK


def cmd_learn(args) -> int:
    dataset = load_dataset(args.dataset)
    plan = load_floorplan(args.plan)
    _snapshot(args)
    x0, y0, x1, y1 = plan.bbox
    m = args.cell
    bounds = MapBounds(
        lo=(x0 - m, y0 - m, -m), hi=(x1 + m, y1 + m, plan.ceiling + m), cell=args.cell
    )
    tcfg = TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        batch_images=min(args.batch_images, len(dataset)),
        pixels_per_image=args.pixels,
        seed=args.seed,
    )
    out = Path(args.out)
    checkpoint = out / "checkpoint.npz" if args.checkpoint_every > 0 else None

    loss_path = out / "loss.csv"
    rows: list[str] = []
    if checkpoint is not None and checkpoint.exists() and loss_path.exists():
        # keep only rows the checkpoint already covers; training re-emits the rest
        with np.load(checkpoint) as ck:
            done = int(ck["step"])
        with open(loss_path) as fh:
            header = fh.readline()
            rows = [line for line in fh if int(line.split(",", 1)[0]) < done]

    def progress(step, loss, sigma):
        rows.append(f"{step},{loss:.6f},{sigma:.6f}\n")
        if args.log_every and (step + 1) % args.log_every == 0:
            print(f"step {step + 1}/{tcfg.steps}  loss {loss:.4f}  sigma_d {sigma:.4f}")

    vmap = learn_map(
        dataset,
        bounds,
        tcfg,
        checkpoint_path=checkpoint,
        checkpoint_every=args.checkpoint_every,
        progress=progress,
    )
    save_map(vmap, out / "map.vxnm")
    tmp = f"{loss_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write("step,loss,sigma_depth\n")
        fh.writelines(rows)
    os.replace(tmp, loss_path)
    print(f"trained {tcfg.steps} steps on {len(dataset)} views -> {out / 'map.vxnm'}")
    return EXIT_OK


def cmd_track_eval(args) -> int:
    plan = load_floorplan(args.plan)
    vmap = load_map(args.map)
    noise_name, noise = parse_noise(args.noise, plan.body_length)
    method = parse_method(args.method)
    jobs = resolve_jobs(args.jobs)
    _snapshot(args, noise_name=noise_name, method_internal=method, jobs_resolved=jobs)

    rows = evaluate_tracking(
        plan, vmap, args.trajectories, args.seeds, noise,
        method, task_seed=args.seed, jobs=jobs,
    )
    out = Path(args.out)
    write_tracking_csv(out / "tracking.csv", rows)
    plot_rmse_cdf(rows, out / "rmse_cdf.svg")

    loc = np.array([r["loc_rmse_m"] for r in rows], dtype=float)
    ori = np.array([r["ori_rmse_rad"] for r in rows], dtype=float)
    done = np.isfinite(loc)
    print(f"{len(rows)} runs ({args.trajectories} trajectories x {args.seeds} seeds), "
          f"method {args.method}, noise {noise_name}")
    if done.any():
        print(f"loc RMSE: median {np.median(loc[done]):.3f} m, "
              f"p95 {np.quantile(loc[done], 0.95):.3f} m, "
              f"< 0.1 m in {np.mean(loc[done] < 0.1):.1%} of completed runs")
        print(f"ori RMSE: median {math.degrees(np.median(ori[done])):.2f} deg")
    if not done.all():
        print(f"warning: {int((~done).sum())} runs produced no trajectory (no plan found)")
    print(f"wrote {out / 'tracking.csv'}")
    return EXIT_OK


def cmd_navigate(args) -> int:
    plan = load_floorplan(args.plan)
    vmap = load_map(args.map)
    noise_name, noise = parse_noise(args.noise, plan.body_length)
    method = parse_method(args.method)
    jobs = resolve_jobs(args.jobs)
    _snapshot(args, noise_name=noise_name, method_internal=method, jobs_resolved=jobs)

    tasks = sample_tasks(plan, args.tasks, np.random.default_rng(args.seed))
    env = Path(args.plan).stem
    rows, per_method = evaluate_navigation(
        plan, vmap, tasks, noise, (method,),
        env=env, noise_name=noise_name, seed0=args.seed, jobs=jobs,
    )
    out = Path(args.out)
    write_results_csv(out / "results.csv", rows)

    results = per_method[method]
    score = spl(results)
    success_rate = float(np.mean([r.success for r in results]))
    summary = {
        "method": args.method, "noise": noise_name, "tasks": len(tasks),
        "spl": score, "success_rate": success_rate,
    }
    tmp = f"{out / 'summary.json'}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, out / "summary.json")

    # re-run the first task (same seed, deterministic) for the trajectory plot
    _, rec = run_episode(
        plan, vmap, tasks[0], noise, method, seed=args.seed,
        optimal_len=float(rows[0]["l_len"]),
    )
    plot_topdown(plan, rec, tasks[0].target, out / "topdown.svg")

    print(f"{len(tasks)} tasks, method {args.method}, noise {noise_name}: "
          f"SPL {score:.3f}, success {success_rate:.1%}")
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    plan = load_floorplan(args.plan)
    vmap = load_map(args.map)
    _snapshot(args)
    rows = bench_runtimes(plan, vmap, trials=args.trials, seed=args.seed)
    out = Path(args.out)
    write_runtime_csv(out / "runtime.csv", rows)
    plot_runtime_bars(rows, out / "runtime.svg")

    by = {r["component"]: r["mean_s"] for r in rows}
    for r in rows:
        hz = 1.0 / r["mean_s"] if r["mean_s"] > 0 else float("inf")
        print(f"{r['component']:<20s} {r['mean_s'] * 1e3:8.2f} ms  ({hz:6.1f} Hz, n={r['trials']})")
    ratio = by["track_step"] / by["emission_track_step"]
    ok = ratio <= 1.0 / 3.0
    print(f"relative speed: track_step <= emission_track_step / 3: "
          f"{'PASS' if ok else 'FAIL'} (ratio {ratio:.3f})")
    return EXIT_OK if ok else EXIT_ALGO


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxnav",
        description="navigation and pose tracking in learned voxel world models",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, jobs=False):
        p.add_argument("--seed", type=int, default=0, help="global RNG seed")
        p.add_argument("--out", required=True, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel episodes (VOXNAV_THREADS overrides)")

    p = sub.add_parser("gen-world", help="generate a procedural multi-room floor plan")
    common(p)
    p.add_argument("--width", type=float, default=8.0)
    p.add_argument("--height", type=float, default=8.0)
    p.add_argument("--rooms", default="3,6", help="min,max room count")
    p.add_argument("--boxes", default="1,3", help="min,max boxes per room")
    p.add_argument("--body", type=float, default=0.2, help="agent body length (m)")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("capture", help="render a posed RGB-D dataset at random free poses")
    common(p)
    p.add_argument("--plan", required=True, help="floor plan JSON")
    p.add_argument("--count", type=int, default=200, help="number of views")
    p.add_argument("--camera-height", type=float, default=0.4)
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("learn", help="fit a voxel map to a captured dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="capture output directory")
    p.add_argument("--plan", required=True, help="floor plan JSON (sets map bounds)")
    p.add_argument("--cell", type=float, default=0.1, help="voxel edge length (m)")
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-images", type=int, default=25)
    p.add_argument("--pixels", type=int, default=200, help="pixels sampled per image")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="steps between checkpoints (0 disables; rerun resumes)")
    p.add_argument("--log-every", type=int, default=0, help="print loss every N steps")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("track-eval", help="pose-tracking RMSE along piloted trajectories")
    common(p, jobs=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--map", required=True, help="learned map file")
    p.add_argument("--trajectories", type=int, default=30)
    p.add_argument("--seeds", type=int, default=5, help="seeds per trajectory")
    p.add_argument("--noise", default="low", help="high|mid|low|custom:<deg>,<m>")
    p.add_argument("--method", default="ours", help="|".join(METHOD_NAMES))
    p.set_defaults(func=cmd_track_eval)

    p = sub.add_parser("navigate", help="closed-loop navigation evaluation (SPL)")
    common(p, jobs=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--tasks", type=int, default=50)
    p.add_argument("--noise", default="low", help="high|mid|low|custom:<deg>,<m>")
    p.add_argument("--method", default="ours", help="|".join(METHOD_NAMES))
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("bench", help="wall-time table for the core per-step operations")
    common(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return int(args.func(args))
    except (OSError, json.JSONDecodeError) as err:  # before ValueError: decode errors are I/O
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoPathError, NoPlacementError) as err:
        print(f"algorithmic failure: {err}", file=sys.stderr)
        return EXIT_ALGO


if __name__ == "__main__":
    sys.exit(main())

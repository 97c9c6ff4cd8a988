"""Shipping gate: each release criterion measured end to end, one test each.

Every test prints one summary line (visible with -rA or -s) right before its
assertion, so a full run reads as a checklist. Learned-map scenes are
expensive to build and are shared module-scoped fixtures; each criterion's
own measurement fits its runtime budget on a single core.
"""

import math
import time

import numpy as np
import pytest

from fdtools import batch_signature, stable_rows
from scenes import box_room_plan, monochrome, paint_plan_map, wall_slab_map
from test_planning import dijkstra_step_pair, path_step_pair
from voxnav.evaluation import (
    EpisodeConfig,
    NavResult,
    TrajectoryRecord,
    bench_runtimes,
    evaluate_navigation,
    evaluate_tracking,
    rasterize_plan,
    rmse,
    spl,
)
from voxnav.geometry import (
    AgentState,
    CameraIntrinsics,
    Control,
    agent_to_camera,
    default_mount,
    pixel_unit_dirs,
    wrap_angle,
)
from voxnav.map_learning import (
    MapBounds,
    PixelBatch,
    PosedDataset,
    TrainConfig,
    learn_map,
    loss_gradients,
    minibatch_loss,
)
from voxnav.planning import NoPathError, ObstacleIndex, PlanConfig, astar_plan
from voxnav.renderer import RenderConfig, RgbdImage, render_rgbd
from voxnav.simulator import (
    WorldSpec,
    generate_floorplan,
    noise_preset,
    observe,
    sample_free_states,
    sample_tasks,
    step_dynamics,
)
from voxnav.tracking import (
    TrackerConfig,
    associate,
    render_prediction,
    tracking_grad,
    tracking_objective,
)
from voxnav.voxel_map import EmissionScales, VoxelMap, occupancy_slice

LOW = noise_preset("low")
MID = noise_preset("mid")
CAP_K = CameraIntrinsics(30.0, 32.0, 24.0, 64, 48)
CAP_RC = RenderConfig(step=0.1, n_steps=80, tau=0.5)
CAMERA_HEIGHT = 0.4


def _report(tag: str, ok: bool, detail: str) -> None:
    print(f"[{tag}] {detail} -- {'PASS' if ok else 'FAIL'}")


# ------------------------------------------------------------ scene fixtures


def _capture(plan, n_views: int, seed: int) -> PosedDataset:
    rng = np.random.default_rng(seed)
    states = sample_free_states(plan, n_views, rng)
    items = [
        (
            observe(plan, s, CAP_K, CAP_RC, CAMERA_HEIGHT),
            agent_to_camera(s, default_mount(), CAMERA_HEIGHT),
        )
        for s in states
    ]
    return PosedDataset(items)


def _learn(plan, dataset: PosedDataset, steps: int) -> VoxelMap:
    x0, y0, x1, y1 = plan.bbox
    bounds = MapBounds(
        lo=(x0 - 0.1, y0 - 0.1, -0.1),
        hi=(x1 + 0.1, y1 + 0.1, plan.ceiling + 0.1),
        cell=0.1,
    )
    return learn_map(dataset, bounds, TrainConfig(steps=steps, seed=0), CAP_RC)


@pytest.fixture(scope="module")
def box_bundle():
    """Desk-scale room with a learned map (monochrome: clean geometry)."""
    plan = monochrome(box_room_plan())
    vmap = _learn(plan, _capture(plan, 200, 11), steps=2000)
    return plan, vmap


@pytest.fixture(scope="module")
def world_bundles():
    """Three procedural multi-room worlds, each with a learned map."""
    spec = WorldSpec(width=6.0, height=6.0, room_range=(3, 4), boxes_per_room=(1, 2))
    out = []
    for seed in (31, 47, 90):
        plan = generate_floorplan(seed, spec)
        vmap = _learn(plan, _capture(plan, 400, seed + 1), steps=4000)
        out.append((plan, vmap))
    return out


# --------------------------------------------------- 1. gradient fidelity


def _batch_from_image(img: RgbdImage, pose, pix: np.ndarray) -> PixelBatch:
    unit = pixel_unit_dirs(img.intrinsics)
    j, i = pix[:, 1], pix[:, 0]
    return PixelBatch(
        origins=np.broadcast_to(pose.t, (len(pix), 3)).copy(),
        dirs=unit[j, i] @ pose.r.T,
        rgb=img.rgb[j, i],
        depth=img.depth[j, i],
    )


def _emission_staging(seed: int):
    """Random perturbed-slab map plus a 100-ray batch rendered off the truth."""
    rng = np.random.default_rng(seed)
    base = wall_slab_map(sigma_rgb=0.14, sigma_depth=0.7)
    vmap = VoxelMap(
        occ=base.occ + rng.normal(0.0, 0.05, base.occ.shape),
        col=base.col.copy(),
        origin=base.origin,
        cell=base.cell,
        scales=base.scales,
    )
    rcfg = RenderConfig(step=0.1, n_steps=25, tau=0.5)
    pose = agent_to_camera(
        AgentState(
            1.5 + rng.uniform(-0.2, 0.2), 0.35, math.pi / 2 + rng.uniform(-0.1, 0.1)
        ),
        default_mount(),
        0.7,
    )
    img = render_rgbd(wall_slab_map(), pose, CAP_K, rcfg)
    pix = np.column_stack(
        [rng.integers(0, CAP_K.width, 100), rng.integers(0, CAP_K.height, 100)]
    )
    return vmap, _batch_from_image(img, pose, pix), rcfg, rng


def _stable_loss_pair(vmap, batch, cell_idx, h, grid, rcfg):
    # only score probes whose discrete march signature survives +-h: a probe
    # straddling a crossing-index or sign flip measures the kink, not the
    # derivative
    outs = []
    sig0 = batch_signature(vmap, batch, rcfg)
    for s in (h, -h):
        if grid == "occ":
            occ = vmap.occ.copy()
            occ.reshape(-1)[cell_idx] += s
            probe = VoxelMap(
                occ=occ, col=vmap.col, origin=vmap.origin, cell=vmap.cell, scales=vmap.scales
            )
        else:
            col = vmap.col.copy()
            col.reshape(-1)[cell_idx] += s
            probe = VoxelMap(
                occ=vmap.occ, col=col, origin=vmap.origin, cell=vmap.cell, scales=vmap.scales
            )
        if not stable_rows([sig0, batch_signature(probe, batch, rcfg)]).all():
            return None
        outs.append(minibatch_loss(probe, batch, rcfg))
    return outs


def _grid_probes(quota: int, grid: str, seed0: int, rel_errs: list) -> int:
    checked = 0
    h = 1e-4
    for staging in range(50):
        vmap, batch, rcfg, rng = _emission_staging(seed0 + staging)
        g_occ, g_col, _ = loss_gradients(vmap, batch, rcfg)
        g = (g_occ if grid == "occ" else g_col).reshape(-1)
        touched = np.flatnonzero(np.abs(g) > 1e-6)
        for cell in rng.permutation(touched):
            pair = _stable_loss_pair(vmap, batch, cell, h, grid, rcfg)
            if pair is None:
                continue
            fd = (pair[0] - pair[1]) / (2 * h)
            an = g[cell]
            err = abs(fd - an) / max(abs(an), 1e-3)
            rel_errs.append(err)
            assert err <= 1e-3, f"{grid} cell {cell} staging {staging}: fd {fd} vs {an}"
            checked += 1
            if checked >= quota:
                return checked
    return checked


def _sigma_probes(quota: int, seed0: int, rel_errs: list) -> int:
    h = 1e-4
    for k in range(quota):
        vmap, batch, rcfg, _ = _emission_staging(seed0 + k)
        _, _, g_s2 = loss_gradients(vmap, batch, rcfg)
        vals = []
        for s in (h, -h):
            probe = VoxelMap(
                occ=vmap.occ,
                col=vmap.col,
                origin=vmap.origin,
                cell=vmap.cell,
                scales=EmissionScales.tied(vmap.scales.sigma_depth + s),
            )
            vals.append(minibatch_loss(probe, batch, rcfg))
        fd = (vals[0] - vals[1]) / (2 * h)
        err = abs(fd - g_s2) / max(abs(g_s2), 1e-3)
        rel_errs.append(err)
        assert err <= 1e-3, f"sigma staging {k}: fd {fd} vs {g_s2}"
    return quota


def _adaptive_central_fd(f, h0: float, scale: float) -> float:
    # halve the step until two successive estimates agree: an interval that
    # straddles an L1 kink or clip boundary measures the subgradient switch,
    # not the derivative, and shows up as step-dependent estimates
    prev = None
    h = h0
    for _ in range(7):
        fd = (f(h) - f(-h)) / (2 * h)
        if prev is not None and abs(fd - prev) <= 1e-5 * scale:
            return fd
        prev = fd
        h /= 2
    return prev


def _twist_probes(n_stagings: int, seed0: int, rel_errs: list) -> int:
    room = paint_plan_map(box_room_plan(), cell=0.1)
    rcfg = RenderConfig(step=0.1, n_steps=80, tau=0.5)
    # principal point off the integer grid and anchor != cache pose: the
    # identity warp otherwise parks pixels exactly on bilinear lattice kinks
    intr = CameraIntrinsics(30.0, 31.6, 23.7, 64, 48)
    cfg = TrackerConfig(opt_steps=60, pixels_per_step=800, seed=0)
    checked = 0
    for k in range(n_stagings):
        rng = np.random.default_rng(seed0 + k)
        truth = AgentState(
            1.0 + rng.uniform(-0.1, 0.1),
            1.0 + rng.uniform(-0.1, 0.1),
            math.radians(30.0) + rng.uniform(-0.3, 0.3),
        )
        pred = AgentState(truth.x + 0.03, truth.y - 0.02, truth.heading - math.radians(1.5))
        pose_t = agent_to_camera(truth, default_mount(), cfg.camera_height)
        obs0 = render_rgbd(room, pose_t, intr, rcfg)
        # shift colours and depth away from zero residuals: L1 kinks live there
        obs = RgbdImage(
            rgb=np.clip(obs0.rgb + 0.07, 0.0, 1.0), depth=obs0.depth + 0.15, intrinsics=intr
        )
        cache = render_prediction(room, pred, intr, rcfg, cfg.camera_height)
        anchor_state = AgentState(
            pred.x + 0.015, pred.y - 0.015, pred.heading + math.radians(0.9)
        )
        anchor = agent_to_camera(anchor_state, default_mount(), cfg.camera_height)
        assoc = associate(
            cache, obs, cache.pose.inverse().compose(anchor), np.arange(0, 3072, 4)
        )
        _, grad = tracking_grad(assoc, cache, obs, anchor, pred, cfg)
        scale = max(np.abs(grad).max(), 1.0)
        for dim in range(6):

            def at(h, dim=dim):
                e = np.zeros(6)
                e[dim] = h
                return tracking_objective(assoc, cache, obs, anchor, e, pred, cfg)

            fd = _adaptive_central_fd(at, 1e-6, scale)
            err = abs(fd - grad[dim]) / scale
            rel_errs.append(err)
            assert err <= 1e-3, f"twist staging {k} dim {dim}: fd {fd} vs {grad[dim]}"
            checked += 1
    return checked


def test_c1_gradient_fidelity_200_probes():
    t0 = time.perf_counter()
    rel_errs: list = []
    n = 0
    n += _grid_probes(70, "occ", seed0=300, rel_errs=rel_errs)
    n += _grid_probes(50, "col", seed0=600, rel_errs=rel_errs)
    n += _sigma_probes(20, seed0=900, rel_errs=rel_errs)
    n += _twist_probes(10, seed0=1200, rel_errs=rel_errs)
    dt = time.perf_counter() - t0
    ok = n == 200 and max(rel_errs) <= 1e-3
    _report(
        "C1",
        ok,
        f"gradient fidelity: {n}/200 probes within 1e-3 rel "
        f"(max rel err {max(rel_errs):.2e}, {dt:.0f}s)",
    )
    assert ok


# --------------------------------------------- 2. renderer depth vs planes


def test_c2_rendered_depth_matches_ray_plane_intersection():
    t0 = time.perf_counter()
    worst = 0.0
    pixels = 0
    cases = 0
    # the second slab puts the plane midway between the finer node layers
    for cell, wall_y, dims in ((0.2, 1.5, (16, 16, 8)), (0.1, 1.55, (32, 32, 16))):
        vmap = wall_slab_map(wall_y=wall_y, cell=cell, dims=dims)
        cfg = RenderConfig(step=cell / 2, n_steps=60, tau=0.5)
        for x, y, yaw in (
            (1.5, 0.3, math.pi / 2),
            (0.9, 0.2, math.pi / 2 + 0.5),
            (2.1, 0.6, math.pi / 2 - 0.35),
            (1.2, 0.9, math.pi / 2 + 0.2),
        ):
            pose = agent_to_camera(AgentState(x, y, yaw), default_mount(), 0.7)
            img = render_rgbd(vmap, pose, CAP_K, cfg)
            dirs = pixel_unit_dirs(CAP_K) @ pose.r.T
            dy = dirs[..., 1]
            hit = img.depth < cfg.max_range - 1e-9
            assert np.all(dy[hit] > 0.0)
            analytic = (wall_y - pose.t[1]) / dy[hit]
            err = np.abs(img.depth[hit] - analytic)
            assert np.all(err <= cfg.step + 1e-9)
            worst = max(worst, float(err.max() / cfg.step))
            pixels += int(hit.sum())
            cases += 1
    dt = time.perf_counter() - t0
    ok = pixels > 2000 and worst <= 1.0 + 1e-9
    _report(
        "C2",
        ok,
        f"depth vs ray-plane intersection: worst |err| = {worst:.2f} steps "
        f"over {pixels} hit pixels, {cases} poses ({dt:.1f}s)",
    )
    assert ok


# ------------------------------------------------- 3. A* vs Dijkstra oracle


def test_c3_astar_cost_equals_dijkstra_on_100_generated_lattices():
    t0 = time.perf_counter()
    cfg = PlanConfig(step=0.16, safety=0.24, goal_tol=0.16)
    spec = WorldSpec(
        width=4.6, height=4.0, room_range=(2, 3), boxes_per_room=(1, 1), min_room=1.6
    )
    solved = blocked = 0
    for seed in range(100):
        plan = generate_floorplan(seed, spec)
        vmap = rasterize_plan(plan, cell=0.1)
        sl = occupancy_slice(vmap, 0.4, cfg.tau)
        index = ObstacleIndex(sl.points, bucket=cfg.safety)
        rng = np.random.default_rng(seed)
        pts = rng.uniform([0.3, 0.3], [4.3, 3.7], size=(300, 2))
        free = [p for p in pts if index.clear_of(p, cfg.safety)]
        pair = next(
            (
                (a, b)
                for a in free[:15]
                for b in free[:15]
                if np.linalg.norm(np.asarray(a) - b) > 1.5
            ),
            None,
        )
        assert pair is not None, f"seed {seed}: no free start-goal pair"
        start, goal = pair
        oracle = dijkstra_step_pair(sl, vmap, start, goal, cfg)
        if oracle is None:
            with pytest.raises(NoPathError):
                astar_plan(sl, vmap, start, goal, cfg)
            blocked += 1
            continue
        wp = astar_plan(sl, vmap, start, goal, cfg)
        assert path_step_pair(wp, cfg.step) == oracle, f"seed {seed}: cost mismatch"
        solved += 1
    dt = time.perf_counter() - t0
    ok = solved + blocked == 100
    _report(
        "C3",
        ok,
        f"A* cost == Dijkstra oracle on {solved + blocked}/100 generated lattices "
        f"({solved} solved, {blocked} blocked, {dt:.0f}s)",
    )
    assert ok


# ------------------------------------------------- 4. tracking accuracy


def test_c4_tracking_accuracy_on_learned_map(box_bundle):
    plan, vmap = box_bundle
    t0 = time.perf_counter()
    rows = evaluate_tracking(plan, vmap, 30, 5, LOW, ecfg=EpisodeConfig())
    dt = time.perf_counter() - t0
    loc = np.array([r["loc_rmse_m"] for r in rows])
    ori = np.array([r["ori_rmse_rad"] for r in rows])
    good = np.isfinite(loc) & (loc < 0.1) & (ori < math.radians(5.0))
    frac = good.mean()
    ok = len(rows) == 150 and frac >= 0.95
    _report(
        "C4",
        ok,
        f"tracking on learned map: {good.sum()}/{len(rows)} runs with "
        f"loc<0.1m and ori<5deg ({100 * frac:.1f}% >= 95%), "
        f"median loc {np.median(loc) * 1000:.1f}mm ({dt:.0f}s)",
    )
    assert ok


# ------------------------------------------------------- 5. tracker speed


def test_c5_tracker_speed_ratio(box_bundle):
    plan, vmap = box_bundle
    rows = bench_runtimes(plan, vmap, trials=100)
    by = {r["component"]: r["mean_s"] for r in rows}
    track, emis = by["track_step"], by["emission_track_step"]
    ok = track <= emis / 3.0
    _report(
        "C5",
        ok,
        f"tracker speed: track_step {track * 1000:.0f}ms ({1 / track:.1f} Hz, "
        f"reported, non-gating) vs emission baseline {emis * 1000:.0f}ms, "
        f"ratio {track / emis:.3f} <= 1/3 on 100 paired steps",
    )
    assert ok


# --------------------------------------------------- 6. navigation success


def test_c6_navigation_spl_on_multiroom_worlds(world_bundles):
    t0 = time.perf_counter()
    pooled: list = []
    per_world = []
    for i, (plan, vmap) in enumerate(world_bundles):
        tasks = sample_tasks(plan, 50, np.random.default_rng(1000 + i))
        _, per = evaluate_navigation(
            plan, vmap, tasks, LOW, ("ours",), seed0=1000 + 100 * i, ecfg=EpisodeConfig()
        )
        pooled.extend(per["ours"])
        per_world.append(spl(per["ours"]))
    value = spl(pooled)
    dt = time.perf_counter() - t0
    ok = len(pooled) == 150 and value >= 0.75
    _report(
        "C6",
        ok,
        f"navigation SPL {value:.3f} >= 0.75 over 3 worlds x 50 tasks, low noise "
        f"(per world: {', '.join(f'{v:.3f}' for v in per_world)}; {dt / 60:.0f}min)",
    )
    assert ok


# --------------------------------------------------- 7. ablation ordering


def test_c7_ablation_ordering_at_mid_noise(world_bundles):
    t0 = time.perf_counter()
    pooled: dict = {"ours": [], "no_map": [], "dynamics_only": []}
    for i, (plan, vmap) in enumerate(world_bundles):
        tasks = sample_tasks(plan, 25, np.random.default_rng(2000 + i))
        _, per = evaluate_navigation(
            plan,
            vmap,
            tasks,
            MID,
            ("ours", "no_map", "dynamics_only"),
            seed0=2000 + 100 * i,
            ecfg=EpisodeConfig(),
        )
        for m, res in per.items():
            pooled[m].extend(res)
    ours, nomap, dyn = (spl(pooled[m]) for m in ("ours", "no_map", "dynamics_only"))
    dt = time.perf_counter() - t0
    ok = ours - nomap >= 0.05 and ours - dyn >= 0.05
    _report(
        "C7",
        ok,
        f"mid-noise ablation: ours {ours:.3f} vs no-map {nomap:.3f} (+{ours - nomap:.3f}) "
        f"vs dynamics-only {dyn:.3f} (+{ours - dyn:.3f}), paired seeds, gaps >= 0.05 "
        f"({dt / 60:.0f}min)",
    )
    assert ok


# ------------------------------------------------ 8. noise-model properties


def test_c8_noise_invariants_over_one_million_steps():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    noise = noise_preset("high")
    s = AgentState(0.0, 0.0, 0.0)
    min_proj = math.inf
    min_signed_dh = math.inf
    zero_turn_dh = 0.0
    n = 1_000_000
    for i in range(n):
        turn = rng.uniform(-0.2, 0.2) if i % 5 else 0.0
        u = Control(turn, rng.uniform(-math.pi, math.pi), rng.uniform(0.0, 0.16))
        nxt = step_dynamics(s, u, noise, rng)
        dh = wrap_angle(nxt.heading - s.heading)
        if u.turn == 0.0:
            zero_turn_dh = max(zero_turn_dh, abs(dh))
        else:
            min_signed_dh = min(min_signed_dh, dh * math.copysign(1.0, u.turn))
        proj = (nxt.x - s.x) * math.cos(u.move_dir) + (nxt.y - s.y) * math.sin(u.move_dir)
        min_proj = min(min_proj, proj)
        s = nxt
        if not -20.0 < s.x < 20.0 or not -20.0 < s.y < 20.0:
            s = AgentState(0.0, 0.0, s.heading)
    dt = time.perf_counter() - t0
    # the float tolerances absorb heading-wrap rounding, nothing else
    ok = min_proj >= -1e-12 and min_signed_dh >= -1e-12 and zero_turn_dh <= 1e-12
    _report(
        "C8",
        ok,
        f"noise invariants over 1e6 steps: min displacement projection {min_proj:.1e}, "
        f"min signed turn {min_signed_dh:.1e}, zero-turn heading drift {zero_turn_dh:.1e} "
        f"({dt:.0f}s)",
    )
    assert ok


# ------------------------------------------------------ 9. metric examples


def test_c9_metric_examples_exact():
    def nav(success, p_len, l_len):
        return NavResult(
            task_id="t", success=success, p_len=p_len, l_len=l_len, steps=1, final_dist=0.0
        )

    assert spl([nav(True, 2.0, 2.0)]) == 1.0
    assert spl([nav(False, 2.0, 2.0)]) == 0.0
    # perfect task plus double-length task averages to (1 + 0.5) / 2
    assert spl([nav(True, 4.0, 2.0), nav(True, 2.0, 2.0)]) == 0.75

    def record(truth, est):
        rec = TrajectoryRecord()
        for q, e in zip(truth, est):
            rec.append(q, e, 0.0, None, False)
        return rec

    same = record([AgentState(1.0, 2.0, 0.3)] * 2, [AgentState(1.0, 2.0, 0.3)] * 2)
    assert rmse(same) == (0.0, 0.0)

    off = record([AgentState(0.0, 0.0, 0.0)] * 2, [AgentState(0.1, 0.0, 0.0)] * 2)
    loc, _ = rmse(off)
    assert loc == pytest.approx(0.1, abs=1e-12)

    eps = 1e-3
    wrap = record(
        [AgentState(0.0, 0.0, math.pi - eps)] * 2,
        [AgentState(0.0, 0.0, -math.pi + eps)] * 2,
    )
    _, ori = rmse(wrap)
    assert ori == pytest.approx(2 * eps, abs=1e-12)

    _report(
        "C9", True, "metric examples exact: SPL 1.0 / 0.0 / 0.75, RMSE 0 / 0.1m / wrapped 2eps"
    )

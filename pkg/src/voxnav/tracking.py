"""Per-step pose estimation against the learned map.

The main tracker aligns each observation to a cached full render of the map
at the previous estimate: a photometric L1 term on bilinearly interpolated
cached colour plus a point-to-plane L1 term against cached depth normals,
with a Gaussian prior around the dynamics prediction. The pose is optimized
as a 6-dof twist around the predicted camera pose with Adam, re-anchoring
each iteration: the gradient is always evaluated at the identity twist of
the current anchor and the step is retracted onto the pose, which keeps the
gradient exact while Adam's moments ride along in the slowly drifting local
frame. Out-of-plane motion (camera height, roll, pitch) is softly pinned so
the 6-dof estimate stays consistent with the planar agent.

The emission baseline reuses the loop but differentiates the renderer's
observation log-likelihood through the ray march instead, which is why it is
several times slower per step: every iteration re-marches its pixel rays,
while the main tracker only warps points against the fixed cache.

Big residuals are dropped, not clamped: any pixel whose photometric term
exceeds 1.0 or whose geometric term exceeds 5.0 contributes nothing to the
value or the gradient of that evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .geometry import (
    AgentState,
    CameraIntrinsics,
    Control,
    Pose,
    agent_to_camera,
    camera_points,
    default_mount,
    pixel_unit_dirs,
    se3_exp,
    skew,
    wrap_angle,
)
from .map_learning import AdamState, adam_step
from .renderer import RenderConfig, RgbdImage, log_likelihood_pose_grad, march_rays, render_rgbd
from .simulator import DEFAULT_CAMERA_HEIGHT, NoiseConfig, mean_step
from .voxel_map import VoxelMap

OUT_OF_PLANE_SCALE = 1e-3  # soft pin on camera height / roll / pitch
_MIN_PRIOR_XY = 0.01  # meters; floors keep the prior proper under zero noise
_MIN_PRIOR_HEADING = math.radians(1.0)


class TrackingFailure(RuntimeError):
    """No usable associations: the optimizer has nothing to align."""


@dataclass(frozen=True)
class TrackerConfig:
    opt_steps: int = 100
    pixels_per_step: int = 1000
    lr_translation: float = 0.01
    lr_rotation: float = 0.01
    photo_clip: float = 1.0
    geo_clip: float = 5.0
    prior_xy: float = 0.03  # mid-level motion noise by default
    prior_heading: float = math.radians(6.0)
    data_weight: float = 1.0
    prior_weight: float = 1.0
    seed: int = 0
    camera_height: float = DEFAULT_CAMERA_HEIGHT

    def __post_init__(self):
        for name in (
            "opt_steps",
            "pixels_per_step",
            "lr_translation",
            "lr_rotation",
            "photo_clip",
            "geo_clip",
            "prior_xy",
            "prior_heading",
            "camera_height",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.data_weight < 0 or self.prior_weight < 0:
            raise ValueError("weights must be non-negative")


def baseline_config(base: TrackerConfig = TrackerConfig()) -> TrackerConfig:
    """Emission-tracker defaults: slower, separately tuned learning rates."""
    return replace(base, lr_translation=0.001, lr_rotation=0.002)


def tracker_config_for(noise: NoiseConfig, **overrides) -> TrackerConfig:
    """Prior scales from the actual motion noise, floored so quantization
    error still fits under the prior when the noise scales are zero."""
    return TrackerConfig(
        prior_xy=max(noise.sigma_speed, _MIN_PRIOR_XY),
        prior_heading=max(noise.sigma_turn, _MIN_PRIOR_HEADING),
        **overrides,
    )


def predict_state(z_prev: AgentState, u: Control) -> AgentState:
    """Noise-free dynamics mean; the prior mode for the next step."""
    return mean_step(z_prev, u)


# -------------------------------------------------------------------- normals


def depth_normals(depth: np.ndarray, K: CameraIntrinsics, max_range: float):
    """Per-pixel surface normals from central differences of lifted points.

    Returns (normals (H, W, 3), valid (H, W)). Border pixels, pixels whose
    neighbourhood includes a max-range miss, and degenerate crosses are
    invalid. Normals are oriented toward the camera (n . view < 0).
    """
    pts = camera_points(depth, K)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return normals, valid
    dh = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dh, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = norm > 1e-12
    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)
    view = pixel_unit_dirs(K)[1:-1, 1:-1]
    flip = (n * view).sum(axis=-1) > 0.0
    n[flip] *= -1.0
    hit = depth < max_range - 1e-12
    near_ok = hit[1:-1, 1:-1] & hit[1:-1, 2:] & hit[1:-1, :-2] & hit[2:, 1:-1] & hit[:-2, 1:-1]
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok & near_ok
    return normals, valid


# ---------------------------------------------------------------------- cache


@dataclass
class PredictionCache:
    """Full rendered (or observed) frame the next observation aligns against."""

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    points: np.ndarray  # (H, W, 3) camera frame
    normals: np.ndarray  # (H, W, 3) camera frame
    valid: np.ndarray  # (H, W) hit & normal ok
    pose: Pose  # world camera pose the frame was taken at
    intrinsics: CameraIntrinsics
    max_range: float


def _build_cache(rgb, depth, pose, K, max_range) -> PredictionCache:
    normals, n_ok = depth_normals(depth, K, max_range)
    hit = depth < max_range - 1e-12
    return PredictionCache(
        rgb=rgb,
        depth=depth,
        points=camera_points(depth, K),
        normals=normals,
        valid=hit & n_ok,
        pose=pose,
        intrinsics=K,
        max_range=max_range,
    )


def render_prediction(
    vmap: VoxelMap, state: AgentState, K: CameraIntrinsics, rcfg: RenderConfig, camera_height: float
) -> PredictionCache:
    pose = agent_to_camera(state, default_mount(), camera_height)
    img = render_rgbd(vmap, pose, K, rcfg)
    return _build_cache(img.rgb, img.depth, pose, K, rcfg.max_range)


def observation_cache(
    obs: RgbdImage, state: AgentState, rcfg: RenderConfig, camera_height: float
) -> PredictionCache:
    """Cache built from a raw observation (map-free frame-to-frame mode)."""
    pose = agent_to_camera(state, default_mount(), camera_height)
    return _build_cache(obs.rgb, obs.depth, pose, obs.intrinsics, rcfg.max_range)


# ---------------------------------------------------------------- association


@dataclass
class Association:
    """Fixed per-iteration correspondences for the sampled pixel set."""

    pixel_ids: np.ndarray  # (M,) flat indices into the observation
    p_obs: np.ndarray  # (M, 3) observed points, current camera frame
    p_hat: np.ndarray  # (M, 3) predicted points, cache camera frame
    n_hat: np.ndarray  # (M, 3) predicted normals, cache camera frame
    valid: np.ndarray  # (M,) bool


def associate(cache: PredictionCache, obs: RgbdImage, T: Pose, pixel_ids: np.ndarray) -> Association:
    """Projective data association at the relative pose T (cache <- current).

    An entry is valid when the observed depth is a hit, the warped point
    lands in front of the cache camera and inside the frame, and the cache
    has valid depth and normal at the nearest pixel.
    """
    K = cache.intrinsics
    w, h = K.width, K.height
    j, i = np.divmod(np.asarray(pixel_ids), w)
    d = obs.depth[j, i]
    u_dirs = pixel_unit_dirs(K)[j, i]
    p = u_dirs * d[:, None]
    q = T.apply(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = K.focal * q[:, 0] / q[:, 2] + K.cx
        py = K.focal * q[:, 1] / q[:, 2] + K.cy
    in_front = q[:, 2] > 1e-9
    in_frame = in_front & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    ni = np.clip(np.rint(np.where(in_frame, px, 0)).astype(int), 0, w - 1)
    nj = np.clip(np.rint(np.where(in_frame, py, 0)).astype(int), 0, h - 1)
    valid = (d < cache.max_range - 1e-12) & in_frame & cache.valid[nj, ni]
    return Association(
        pixel_ids=np.asarray(pixel_ids),
        p_obs=p,
        p_hat=cache.points[nj, ni],
        n_hat=cache.normals[nj, ni],
        valid=valid,
    )


def _bilinear(img: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Bilinear sample of img (H, W, C) at continuous pixels, with clamped
    edges; returns (value (M, C), d/dpx, d/dpy)."""
    h, w = img.shape[:2]
    x = np.clip(px, 0.0, w - 1.0)
    y = np.clip(py, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    c00 = img[y0, x0]
    c10 = img[y0, x0 + 1]
    c01 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    val = (1 - fx) * (1 - fy) * c00 + fx * (1 - fy) * c10 + (1 - fx) * fy * c01 + fx * fy * c11
    dx = (1 - fy) * (c10 - c00) + fy * (c11 - c01)
    dy = (1 - fx) * (c01 - c00) + fx * (c11 - c10)
    # clamped coordinates have zero gradient past the border
    dx *= ((px >= 0) & (px <= w - 1))[:, None]
    dy *= ((py >= 0) & (py <= h - 1))[:, None]
    return val, dx, dy


# -------------------------------------------------------------- planar prior


def _planar_error(cam: Pose, pred: AgentState, camera_height: float):
    """Deviation vector of a camera pose from the predicted planar state.

    Components: x, y (m), yaw (rad, wrapped), camera height (m), pitch, roll.
    """
    mount = default_mount()
    r_body = cam.r @ mount.r.T
    yaw = math.atan2(r_body[1, 0], r_body[0, 0])
    pitch = -math.asin(max(-1.0, min(1.0, r_body[2, 0])))
    roll = math.atan2(r_body[2, 1], r_body[2, 2])
    return np.array(
        [
            cam.t[0] - pred.x,
            cam.t[1] - pred.y,
            wrap_angle(yaw - pred.heading),
            cam.t[2] - camera_height,
            pitch,
            roll,
        ]
    )


def _planar_error_jacobian(cam: Pose) -> np.ndarray:
    """d(deviation)/d(twist) at the identity twist of `cam` (6x6).

    The twist is (rho, phi) right-multiplied: cam * exp(xi). The mount has no
    lever arm, so position responds only to rho; the angles only to phi.
    """
    mount_rt = default_mount().r.T
    r_body = cam.r @ mount_rt
    jac = np.zeros((6, 6))
    # position rows of the deviation vector are x, y (0, 1) and height (3)
    jac[0, 0:3] = cam.r[0]
    jac[1, 0:3] = cam.r[1]
    jac[3, 0:3] = cam.r[2]
    r00, r10, r20 = r_body[0, 0], r_body[1, 0], r_body[2, 0]
    r21, r22 = r_body[2, 1], r_body[2, 2]
    yaw_den = r00 * r00 + r10 * r10
    roll_den = r21 * r21 + r22 * r22
    pitch_den = math.sqrt(max(1.0 - r20 * r20, 1e-12))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        d = cam.r @ skew(e) @ mount_rt
        jac[2, 3 + k] = (r00 * d[1, 0] - r10 * d[0, 0]) / yaw_den
        jac[4, 3 + k] = -d[2, 0] / pitch_den
        jac[5, 3 + k] = (r22 * d[2, 1] - r21 * d[2, 2]) / roll_den
    return jac


def _prior_scales(cfg: TrackerConfig) -> np.ndarray:
    return np.array(
        [cfg.prior_xy, cfg.prior_xy, cfg.prior_heading] + [OUT_OF_PLANE_SCALE] * 3
    )


def _prior_value(cam: Pose, pred: AgentState, cfg: TrackerConfig) -> float:
    dev = _planar_error(cam, pred, cfg.camera_height)
    return float(0.5 * np.sum((dev / _prior_scales(cfg)) ** 2))


def _prior_value_grad(cam: Pose, pred: AgentState, cfg: TrackerConfig):
    dev = _planar_error(cam, pred, cfg.camera_height)
    s2 = _prior_scales(cfg) ** 2
    val = float(0.5 * np.sum(dev * dev / s2))
    grad = (dev / s2) @ _planar_error_jacobian(cam)
    return val, grad


# ------------------------------------------------------------------ objective


def _data_terms(assoc: Association, cache: PredictionCache, obs: RgbdImage, T_total: Pose, cfg):
    """Per-pixel photometric/geometric residual pieces at a concrete warp."""
    K = cache.intrinsics
    v = assoc.valid
    p = assoc.p_obs[v]
    q = T_total.apply(p)
    qz = q[:, 2]
    front = qz > 1e-9
    px = K.focal * q[:, 0] / np.where(front, qz, 1.0) + K.cx
    py = K.focal * q[:, 1] / np.where(front, qz, 1.0) + K.cy
    col, dcdx, dcdy = _bilinear(cache.rgb, px, py)
    j, i = np.divmod(assoc.pixel_ids[v], K.width)
    photo_r = col - obs.rgb[j, i]
    photo = np.abs(photo_r).sum(axis=1)
    geo = ((assoc.p_hat[v] - q) * assoc.n_hat[v]).sum(axis=1)
    keep_p = front & (photo <= cfg.photo_clip)
    keep_g = front & (np.abs(geo) <= cfg.geo_clip)
    return p, q, px, py, photo_r, photo, geo, keep_p, keep_g, dcdx, dcdy


def tracking_objective(
    assoc: Association,
    cache: PredictionCache,
    obs: RgbdImage,
    anchor: Pose,
    xi: np.ndarray,
    pred: AgentState,
    cfg: TrackerConfig,
) -> float:
    """Objective value at camera pose anchor * exp(xi), associations fixed.

    Over-clip terms are dropped from the sum entirely.
    """
    cam = anchor.compose(se3_exp(np.asarray(xi, dtype=float)))
    T_total = cache.pose.inverse().compose(cam)
    _, _, _, _, _, photo, geo, keep_p, keep_g, _, _ = _data_terms(assoc, cache, obs, T_total, cfg)
    data = photo[keep_p].sum() + np.abs(geo[keep_g]).sum()
    return cfg.data_weight * float(data) + cfg.prior_weight * _prior_value(cam, pred, cfg)


def tracking_grad(
    assoc: Association,
    cache: PredictionCache,
    obs: RgbdImage,
    anchor: Pose,
    pred: AgentState,
    cfg: TrackerConfig,
):
    """(value, d/d xi) of the objective at xi = 0 (the anchor itself)."""
    A = cache.pose.inverse().compose(anchor)
    p, q, px, py, photo_r, photo, geo, keep_p, keep_g, dcdx, dcdy = _data_terms(
        assoc, cache, obs, A, cfg
    )
    K = cache.intrinsics
    # dq/dxi: (M, 3, 6); rho block is A.r, phi block is -A.r [p]x
    m = len(p)
    dq = np.empty((m, 3, 6))
    dq[:, :, :3] = A.r
    dq[:, :, 3:] = np.einsum("ab,mbc->mac", A.r, -_skew_batch(p))
    grad = np.zeros(6)

    if keep_g.any():
        # d|g|/dxi = -sign(g) n . dq
        s = np.sign(geo[keep_g])
        ndq = np.einsum("mb,mbc->mc", assoc.n_hat[assoc.valid][keep_g], dq[keep_g])
        grad -= (s[:, None] * ndq).sum(axis=0)

    if keep_p.any():
        qz = q[keep_p, 2]
        dpx_dq = np.zeros((keep_p.sum(), 3))
        dpx_dq[:, 0] = K.focal / qz
        dpx_dq[:, 2] = -K.focal * q[keep_p, 0] / qz**2
        dpy_dq = np.zeros((keep_p.sum(), 3))
        dpy_dq[:, 1] = K.focal / qz
        dpy_dq[:, 2] = -K.focal * q[keep_p, 1] / qz**2
        s = np.sign(photo_r[keep_p])  # (Mp, 3 channels)
        gx = (s * dcdx[keep_p]).sum(axis=1)
        gy = (s * dcdy[keep_p]).sum(axis=1)
        dpix = gx[:, None] * dpx_dq + gy[:, None] * dpy_dq  # (Mp, 3)
        grad += np.einsum("mb,mbc->c", dpix, dq[keep_p])

    value = cfg.data_weight * float(photo[keep_p].sum() + np.abs(geo[keep_g]).sum())
    grad *= cfg.data_weight
    pval, pgrad = _prior_value_grad(anchor, pred, cfg)
    return value + cfg.prior_weight * pval, grad + cfg.prior_weight * pgrad


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# ------------------------------------------------------------------- schedule


@lru_cache(maxsize=8)
def _pixel_schedule(seed: int, steps: int, count: int, n_pixels: int) -> np.ndarray:
    """The fixed iteration-by-iteration pixel index table, shared by every
    invocation with the same config."""
    if count > n_pixels:
        raise ValueError(f"pixels_per_step {count} exceeds image size {n_pixels}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    rows = [rng.choice(n_pixels, size=count, replace=False) for _ in range(steps)]
    table = np.stack(rows)
    table.setflags(write=False)
    return table


# --------------------------------------------------------------- filter state


@dataclass
class FilterState:
    estimate: AgentState
    cache: PredictionCache | None
    step: int = 0
    failed: bool = False


def init_tracker(
    state: AgentState, vmap: VoxelMap, K: CameraIntrinsics, cfg: TrackerConfig, rcfg: RenderConfig
) -> FilterState:
    """Start from a known pose with a map-rendered cache."""
    return FilterState(estimate=state, cache=render_prediction(vmap, state, K, rcfg, cfg.camera_height))


def init_no_map_tracker(
    state: AgentState, obs0: RgbdImage, cfg: TrackerConfig, rcfg: RenderConfig
) -> FilterState:
    """Start from a known pose; the cache is the first raw observation."""
    return FilterState(estimate=state, cache=observation_cache(obs0, state, rcfg, cfg.camera_height))


def init_dynamics_tracker(state: AgentState) -> FilterState:
    return FilterState(estimate=state, cache=None)


def _optimize_against_cache(cache, obs, pred: AgentState, cfg: TrackerConfig):
    """Core loop shared by the map and no-map trackers. Returns the planar
    estimate, or raises TrackingFailure when an iteration has nothing valid."""
    K = cache.intrinsics
    schedule = _pixel_schedule(cfg.seed, cfg.opt_steps, cfg.pixels_per_step, K.width * K.height)
    anchor = agent_to_camera(pred, default_mount(), cfg.camera_height)
    adam = AdamState.like(np.zeros(6))
    lr = np.array([cfg.lr_translation] * 3 + [cfg.lr_rotation] * 3)
    t_inv = cache.pose.inverse()
    for it in range(cfg.opt_steps):
        assoc = associate(cache, obs, t_inv.compose(anchor), schedule[it])
        if not assoc.valid.any():
            raise TrackingFailure(f"no valid associations at iteration {it}")
        _, grad = tracking_grad(assoc, cache, obs, anchor, pred, cfg)
        delta, adam = adam_step(np.zeros(6), grad, adam, lr)
        anchor = anchor.compose(se3_exp(delta))
    mount = default_mount()
    r_body = anchor.r @ mount.r.T
    yaw = math.atan2(r_body[1, 0], r_body[0, 0])
    return AgentState(x=float(anchor.t[0]), y=float(anchor.t[1]), heading=yaw)


def track_step(
    fs: FilterState,
    u: Control,
    obs: RgbdImage,
    vmap: VoxelMap,
    cfg: TrackerConfig,
    rcfg: RenderConfig,
):
    """One filtering step of the main tracker: optimize, then re-render the
    cache at the new estimate. On failure the prediction is propagated."""
    pred = predict_state(fs.estimate, u)
    try:
        est = _optimize_against_cache(fs.cache, obs, pred, cfg)
        failed = False
    except TrackingFailure:
        est, failed = pred, True
    cache = render_prediction(vmap, est, obs.intrinsics, rcfg, cfg.camera_height)
    return est, FilterState(estimate=est, cache=cache, step=fs.step + 1, failed=failed)


def no_map_track_step(
    fs: FilterState, u: Control, obs: RgbdImage, cfg: TrackerConfig, rcfg: RenderConfig
):
    """Frame-to-frame ablation: aligns against the previous raw observation."""
    pred = predict_state(fs.estimate, u)
    try:
        est = _optimize_against_cache(fs.cache, obs, pred, cfg)
        failed = False
    except TrackingFailure:
        est, failed = pred, True
    cache = observation_cache(obs, est, rcfg, cfg.camera_height)
    return est, FilterState(estimate=est, cache=cache, step=fs.step + 1, failed=failed)


def dynamics_track_step(fs: FilterState, u: Control):
    """Dead-reckoning ablation: the prediction is the estimate."""
    est = predict_state(fs.estimate, u)
    return est, FilterState(estimate=est, cache=None, step=fs.step + 1, failed=False)


def emission_track_step(
    fs: FilterState,
    u: Control,
    obs: RgbdImage,
    vmap: VoxelMap,
    cfg: TrackerConfig,
    rcfg: RenderConfig,
):
    """Baseline: maximize the renderer's log-likelihood through the march.

    Returns (estimate, FilterState) like track_step; it keeps no image cache.
    """
    pred = predict_state(fs.estimate, u)
    K = obs.intrinsics
    schedule = _pixel_schedule(cfg.seed, cfg.opt_steps, cfg.pixels_per_step, K.width * K.height)
    anchor = agent_to_camera(pred, default_mount(), cfg.camera_height)

    j, i = np.divmod(schedule[0], K.width)
    dirs = pixel_unit_dirs(K)[j, i] @ anchor.r.T
    if not march_rays(vmap, anchor.t, dirs, rcfg).hit.any():
        return pred, FilterState(estimate=pred, cache=None, step=fs.step + 1, failed=True)

    adam = AdamState.like(np.zeros(6))
    lr = np.array([cfg.lr_translation] * 3 + [cfg.lr_rotation] * 3)
    for it in range(cfg.opt_steps):
        j, i = np.divmod(schedule[it], K.width)
        pixels = np.stack([i, j], axis=1)
        _, g_ll = log_likelihood_pose_grad(obs, anchor, vmap, rcfg, pixels)
        _, g_prior = _prior_value_grad(anchor, pred, cfg)
        grad = -cfg.data_weight * g_ll + cfg.prior_weight * g_prior
        delta, adam = adam_step(np.zeros(6), grad, adam, lr)
        anchor = anchor.compose(se3_exp(delta))
    mount = default_mount()
    r_body = anchor.r @ mount.r.T
    yaw = math.atan2(r_body[1, 0], r_body[0, 0])
    est = AgentState(x=float(anchor.t[0]), y=float(anchor.t[1]), heading=yaw)
    return est, FilterState(estimate=est, cache=None, step=fs.step + 1, failed=False)
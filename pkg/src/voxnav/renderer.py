"""Differentiable threshold-crossing RGB-D renderer.

Rays start at the camera center and are sampled at k in {0, step, ...,
n_steps*step} along unit directions. A ray hits at the first sample k_plus
in {step, ..., n_steps*step} whose interpolated occupancy reaches tau. The
surface distance linearises occupancy over the crossing interval:

    alpha = (tau - f_minus) / (f_plus - f_minus),  k_star = k_minus + alpha*step

clamped so k_star stays inside [k_minus, k_plus]. Colour is the trilinear
colour at the surface point, clamped to [0, 1]. Rays with no crossing return
k_star = max_range and mid-grey.

Gradients treat the crossing interval index as a constant: they flow through
alpha into the sixteen occupancy nodes of the interval endpoints, and through
the surface point into the colour nodes. Where alpha is clamped (or the
interval is degenerate) the depth gradient is zero.

The emission model is an independent Laplace per scalar: colour channels with
scale sigma_rgb and depth with scale sigma_depth from the map.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import image_io
from .geometry import CameraIntrinsics, Pose, pixel_unit_dirs
from .voxel_map import VoxelMap, sample_col, sample_col_grad, sample_occ, sample_occ_grad

# Colour of rays that never cross the threshold.
BG_GREY = 0.5

# Crossing intervals with |f_plus - f_minus| below this have no usable slope.
_DEGENERATE_SLOPE = 1e-12

# Ray chunk size keeps the (rays x samples) temporaries bounded.
_RAY_CHUNK = 16384

# Samples are marched in blocks so rays stop sampling once they have hit;
# indoor scenes retire most rays within the first block or two.
_STEP_BLOCK = 16


@dataclass(frozen=True)
class RenderConfig:
    """Ray-marching parameters: sample spacing, sample count, threshold."""

    step: float
    n_steps: int
    tau: float

    def __post_init__(self):
        if self.step <= 0 or self.n_steps < 2:
            raise ValueError("step must be positive and n_steps >= 2")

    @property
    def max_range(self) -> float:
        return self.step * self.n_steps


def default_render_config() -> RenderConfig:
    return RenderConfig(step=0.1, n_steps=200, tau=0.5)


@dataclass
class RgbdImage:
    """Dense RGB-D image. rgb in [0, 1], depth in (0, max_range] meters."""

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        k = self.intrinsics
        if self.rgb.shape != (k.height, k.width, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match intrinsics")
        if self.depth.shape != (k.height, k.width):
            raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics")


@dataclass(frozen=True)
class RayHit:
    hit: bool
    k_star: float
    alpha: float
    p_star: np.ndarray


@dataclass
class MarchResult:
    """Vectorized march output over M rays (non-hit entries hold fill values)."""

    hit: np.ndarray  # (M,) bool
    k_star: np.ndarray  # (M,) distance, max_range where not hit
    alpha: np.ndarray  # (M,) clamped interpolation factor
    k_minus: np.ndarray  # (M,)
    k_plus: np.ndarray  # (M,)
    f_minus: np.ndarray  # (M,)
    f_plus: np.ndarray  # (M,)
    first_idx: np.ndarray  # (M,) sample index of the crossing, -1 where not hit
    grad_ok: np.ndarray  # (M,) True where d k_star / d f is defined and nonzero


def march_rays(vmap: VoxelMap, origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig) -> MarchResult:
    """March M unit-direction rays; origins is (3,) shared or (M, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    m = dirs.shape[0]
    origins = np.asarray(origins, dtype=float)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, (m, 3))

    hit = np.zeros(m, dtype=bool)
    k_star = np.full(m, cfg.max_range)
    alpha = np.zeros(m)
    k_minus = np.zeros(m)
    k_plus = np.zeros(m)
    f_minus = np.zeros(m)
    f_plus = np.zeros(m)
    first_idx = np.full(m, -1, dtype=np.int64)
    grad_ok = np.zeros(m, dtype=bool)

    ks = np.arange(cfg.n_steps + 1) * cfg.step
    for lo in range(0, m, _RAY_CHUNK):
        o = origins[lo : lo + _RAY_CHUNK]
        d = dirs[lo : lo + _RAY_CHUNK]
        active = np.arange(len(d))  # rays still marching, as chunk-local rows
        f_edge = None  # occupancy at sample s0 carried over from the last block
        s0 = 0
        while s0 < cfg.n_steps and len(active):
            s1 = min(s0 + _STEP_BLOCK, cfg.n_steps)
            oa, da = o[active], d[active]
            kk = ks[s0 if f_edge is None else s0 + 1 : s1 + 1]
            pts = oa[:, None, :] + kk[None, :, None] * da[:, None, :]
            f = sample_occ(vmap, pts.reshape(-1, 3)).reshape(len(active), len(kk))
            if f_edge is not None:
                f = np.concatenate([f_edge[:, None], f], axis=1)
            over = f[:, 1:] >= cfg.tau
            h = over.any(axis=1)
            if h.any():
                rows = np.flatnonzero(h)
                fi_local = np.argmax(over[rows], axis=1)
                fi = s0 + fi_local  # global index of the minus sample
                fm = f[rows, fi_local]
                fp = f[rows, fi_local + 1]
                denom = fp - fm
                ok = np.abs(denom) > _DEGENERATE_SLOPE
                a_raw = np.where(ok, (cfg.tau - fm) / np.where(ok, denom, 1.0), 0.0)
                a = np.clip(a_raw, 0.0, 1.0)
                km = fi * cfg.step

                gi = lo + active[rows]
                hit[gi] = True
                k_star[gi] = km + a * cfg.step
                alpha[gi] = a
                k_minus[gi] = km
                k_plus[gi] = km + cfg.step
                f_minus[gi] = fm
                f_plus[gi] = fp
                first_idx[gi] = fi + 1
                grad_ok[gi] = ok & (a_raw > 0.0) & (a_raw < 1.0)
            keep = ~h
            active = active[keep]
            f_edge = f[keep, -1]
            s0 = s1

    return MarchResult(hit, k_star, alpha, k_minus, k_plus, f_minus, f_plus, first_idx, grad_ok)


def kstar_grads(res: MarchResult, cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """(d k_star / d f_minus, d k_star / d f_plus), zero where undefined."""
    denom = res.f_plus - res.f_minus
    safe = np.where(res.grad_ok, denom, 1.0)
    dk_dfm = np.where(res.grad_ok, (res.alpha - 1.0) * cfg.step / safe, 0.0)
    dk_dfp = np.where(res.grad_ok, -res.alpha * cfg.step / safe, 0.0)
    return dk_dfm, dk_dfp


def march_ray(vmap: VoxelMap, origin: np.ndarray, direction: np.ndarray, cfg: RenderConfig) -> RayHit:
    """Single-ray convenience wrapper. direction must be unit norm."""
    direction = np.asarray(direction, dtype=float)
    if not math.isclose(float(np.linalg.norm(direction)), 1.0, rel_tol=1e-6):
        raise ValueError("ray direction must be unit norm")
    res = march_rays(vmap, np.asarray(origin, dtype=float), direction[None, :], cfg)
    p_star = np.asarray(origin, dtype=float) + res.k_star[0] * direction
    return RayHit(bool(res.hit[0]), float(res.k_star[0]), float(res.alpha[0]), p_star)


# ------------------------------------------------------------------ cameras


def pixel_ray(pose: Pose, K: CameraIntrinsics, pixel) -> tuple[np.ndarray, np.ndarray]:
    """World origin and unit direction of the ray through pixel (i, j)."""
    i, j = pixel
    d_cam = np.array([(i - K.cx) / K.focal, (j - K.cy) / K.focal, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    return pose.t.copy(), pose.r @ d_cam


def camera_rays(pose: Pose, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World origin and unit directions (H, W, 3) for the full pixel grid."""
    dirs = pixel_unit_dirs(K) @ pose.r.T
    return pose.t.copy(), dirs


def _shade(vmap: VoxelMap, origins, dirs, res: MarchResult) -> np.ndarray:
    rgb = np.full((len(res.k_star), 3), BG_GREY)
    if res.hit.any():
        h = res.hit
        o = origins if origins.ndim == 2 else np.broadcast_to(origins, dirs.shape)
        p_star = o[h] + res.k_star[h, None] * dirs[h]
        rgb[h] = np.clip(sample_col(vmap, p_star), 0.0, 1.0)
    return rgb


def render_pixels(vmap: VoxelMap, pose: Pose, K: CameraIntrinsics, cfg: RenderConfig, pixels: np.ndarray):
    """Render a pixel subset; pixels is (M, 2) integer (i, j). Returns (rgb, depth)."""
    pixels = np.asarray(pixels)
    unit = pixel_unit_dirs(K)
    dirs = unit[pixels[:, 1], pixels[:, 0]] @ pose.r.T
    res = march_rays(vmap, pose.t, dirs, cfg)
    rgb = _shade(vmap, pose.t, dirs, res)
    return rgb, res.k_star.copy()


def render_rgbd(vmap: VoxelMap, pose: Pose, K: CameraIntrinsics, cfg: RenderConfig) -> RgbdImage:
    """Render the full image."""
    origin, dirs = camera_rays(pose, K)
    flat = dirs.reshape(-1, 3)
    res = march_rays(vmap, origin, flat, cfg)
    rgb = _shade(vmap, origin, flat, res).reshape(K.height, K.width, 3)
    depth = res.k_star.reshape(K.height, K.width)
    return RgbdImage(rgb=rgb, depth=depth, intrinsics=K)


# ------------------------------------------------------------- likelihoods


def _laplace_terms(obs_rgb, obs_depth, rgb, depth, sigma_rgb, sigma_depth):
    col = -math.log(2.0 * sigma_rgb) - np.abs(obs_rgb - rgb) / sigma_rgb
    dep = -math.log(2.0 * sigma_depth) - np.abs(obs_depth - depth) / sigma_depth
    return col, dep


def log_likelihood(obs: RgbdImage, pose: Pose, vmap: VoxelMap, cfg: RenderConfig, pixels: np.ndarray) -> float:
    """Sum of per-scalar Laplace log densities of obs under the rendered image.

    pixels is a non-empty (M, 2) integer array of (i, j) pairs.
    """
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("pixel subset must be non-empty")
    rgb, depth = render_pixels(vmap, pose, K=obs.intrinsics, cfg=cfg, pixels=pixels)
    obs_rgb = obs.rgb[pixels[:, 1], pixels[:, 0]]
    obs_depth = obs.depth[pixels[:, 1], pixels[:, 0]]
    col, dep = _laplace_terms(
        obs_rgb, obs_depth, rgb, depth, vmap.scales.sigma_rgb, vmap.scales.sigma_depth
    )
    return float(col.sum() + dep.sum())


def log_likelihood_pose_grad(
    obs: RgbdImage, pose: Pose, vmap: VoxelMap, cfg: RenderConfig, pixels: np.ndarray
):
    """log_likelihood and its gradient w.r.t. a right-multiplied twist.

    The gradient is of xi -> log_likelihood(obs, pose * exp(xi), ...) at
    xi = 0, twist ordered (translation, rotation). The crossing interval is
    held fixed, matching the renderer's linearisation.
    """
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("pixel subset must be non-empty")
    K = obs.intrinsics
    unit = pixel_unit_dirs(K)
    u_cam = unit[pixels[:, 1], pixels[:, 0]]
    dirs = u_cam @ pose.r.T
    res = march_rays(vmap, pose.t, dirs, cfg)

    rgb = np.full((len(pixels), 3), BG_GREY)
    obs_rgb = obs.rgb[pixels[:, 1], pixels[:, 0]]
    obs_depth = obs.depth[pixels[:, 1], pixels[:, 0]]

    grad = np.zeros(6)
    h = res.hit
    if h.any():
        p_minus = pose.t + res.k_minus[h, None] * dirs[h]
        p_plus = pose.t + res.k_plus[h, None] * dirs[h]
        p_star = pose.t + res.k_star[h, None] * dirs[h]
        _, grad_fm, _, _ = sample_occ_grad(vmap, p_minus)
        _, grad_fp, _, _ = sample_occ_grad(vmap, p_plus)
        col_raw, col_jac, _, _ = sample_col_grad(vmap, p_star)
        rgb[h] = np.clip(col_raw, 0.0, 1.0)

        s_d = np.sign(obs_depth[h] - res.k_star[h]) / vmap.scales.sigma_depth
        unclipped = (col_raw > 0.0) & (col_raw < 1.0)
        s_c = np.sign(obs_rgb[h] - rgb[h]) / vmap.scales.sigma_rgb * unclipped

        dk_dfm, dk_dfp = kstar_grads(res, cfg)
        dk_dfm, dk_dfp = dk_dfm[h], dk_dfp[h]
        # d colour / d k_star = spatial colour Jacobian applied to the ray dir
        dcol_dk = np.einsum("mkd,md->mk", col_jac, dirs[h])
        dll_dk = s_d + np.einsum("mk,mk->m", s_c, dcol_dk)

        # world-space downstream gradients at the three ray points
        a_minus = dll_dk[:, None] * dk_dfm[:, None] * grad_fm
        a_plus = dll_dk[:, None] * dk_dfp[:, None] * grad_fp
        a_star = np.einsum("mk,mkd->md", s_c, col_jac)

        for a_world, k_pt in ((a_minus, res.k_minus[h]), (a_plus, res.k_plus[h]), (a_star, res.k_star[h])):
            b = a_world @ pose.r  # rows are R^T a
            q = k_pt[:, None] * u_cam[h]
            grad[:3] += b.sum(axis=0)
            grad[3:] += np.cross(q, b).sum(axis=0)

    col, dep = _laplace_terms(
        obs_rgb, obs_depth, rgb, res.k_star, vmap.scales.sigma_rgb, vmap.scales.sigma_depth
    )
    return float(col.sum() + dep.sum()), grad


def save_debug_rgbd(img: RgbdImage, prefix: str | os.PathLike) -> None:
    """Dump an RGB-D image as <prefix>.png + <prefix>.dpth."""
    image_io.write_png(img.rgb, f"{prefix}.png")
    image_io.write_depth(img.depth, f"{prefix}.dpth")

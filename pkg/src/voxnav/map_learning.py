"""Offline map fitting from posed RGB-D images.

Minimizes the negative log-likelihood of a dataset under the renderer's
Laplace emission model, by Adam on three parameter blocks: the occupancy
grid, the colour grid, and the depth scale sigma_depth (the colour scale is
tied to sigma_depth / COLOUR_SCALE_RATIO and is not a free parameter).

Gradients are analytic and sparse: each sampled ray touches the sixteen
occupancy nodes of its crossing interval and the eight colour nodes at the
surface point. The crossing interval is treated as constant per step, so a
non-hit ray contributes only to the sigma gradient.

Occupancy is initialized as threshold-centred noise rather than a constant:
a constant field below the threshold admits no crossings anywhere, and a
crossing-free render has zero gradient into the grids, so training could
never start. Noise straddling the threshold seeds surfaces everywhere and
the depth term then carves free space and migrates surfaces cell by cell.

The colour grid starts at the dataset's mean colour. Colour residuals push
on geometry through the surface point's dependence on occupancy, and under
the Laplace model that force has full 1/sigma_rgb magnitude regardless of
residual size, with five times the weight of the depth term. Wherever the
scene is colour-uniform the mean init keeps that term exactly silent; scenes
meant for high-fidelity maps should be painted accordingly (see the world
generator's palette).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_io
from .geometry import CameraIntrinsics, Pose, pixel_unit_dirs
from .renderer import BG_GREY, RenderConfig, RgbdImage, default_render_config, kstar_grads, march_rays
from .voxel_map import (
    COLOUR_SCALE_RATIO,
    EmissionScales,
    VoxelMap,
    sample_col_grad,
    sample_occ_grad,
)

SIGMA_DEPTH_INIT = 2.4
SIGMA_FLOOR = 1e-3
# Occupancy starts noisy around tau + OCC_INIT_OFFSET. The noise creates the
# threshold straddles gradient flow needs to bootstrap; the negative offset
# keeps camera origins mostly below tau. A ray whose first two samples both
# start at or above tau clamps alpha at its first interval and goes gradient
# dead until other views carve its origin, so the bulk must lean free.
OCC_INIT_STD = 0.15
OCC_INIT_OFFSET = -0.1
# Residuals this close to zero take the zero element of the L1 subgradient
# interval [-1, 1]. Without the band, float rounding in trilinear sampling
# turns exactly-fitted values into coin-flip signs at full Laplace force.
_SIGN_EPS = 1e-9


def _sign_nz(r: np.ndarray) -> np.ndarray:
    return np.sign(r) * (np.abs(r) > _SIGN_EPS)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    learning_rate: float = 0.05
    batch_images: int = 25
    pixels_per_image: int = 200
    scale_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch_images, self.pixels_per_image) < 1:
            raise ValueError("steps, batch_images, pixels_per_image must be positive")
        if self.learning_rate <= 0 or self.scale_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class MapBounds:
    """Axis-aligned node lattice: nodes at lo + i*cell, covering [lo, hi]."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    cell: float

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell must be positive")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo on every axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(
            max(2, int(math.ceil((h - l) / self.cell - 1e-9)) + 1) for l, h in zip(self.lo, self.hi)
        )


@dataclass
class PosedDataset:
    """Posed RGB-D images sharing one camera; the map-learning input."""

    items: list[tuple[RgbdImage, Pose]]

    def __post_init__(self):
        if not self.items:
            raise ValueError("dataset must be non-empty")
        k = self.items[0][0].intrinsics
        if any(img.intrinsics != k for img, _ in self.items):
            raise ValueError("all images must share intrinsics")

    def __len__(self):
        return len(self.items)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.items[0][0].intrinsics


@dataclass
class PixelBatch:
    """Flattened Monte-Carlo sample of rays with their observed values."""

    origins: np.ndarray  # (M, 3)
    dirs: np.ndarray  # (M, 3) unit, world frame
    rgb: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)

    def __len__(self):
        return len(self.depth)


# ------------------------------------------------------------- dataset files


def save_dataset(ds: PosedDataset, out_dir) -> None:
    """Write poses.jsonl plus <id>.png / <id>.dpth per image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "poses.jsonl.tmp"
    with open(tmp, "w") as fh:
        for n, (img, pose) in enumerate(ds.items):
            ident = f"{n:06d}"
            k = img.intrinsics
            rec = {
                "id": ident,
                "pose": pose.matrix().reshape(-1).tolist(),
                "intrinsics": {
                    "focal": k.focal,
                    "cx": k.cx,
                    "cy": k.cy,
                    "width": k.width,
                    "height": k.height,
                },
            }
            fh.write(json.dumps(rec) + "\n")
            image_io.write_png(img.rgb, out / f"{ident}.png")
            image_io.write_depth(img.depth, out / f"{ident}.dpth")
    os.replace(tmp, out / "poses.jsonl")


def load_dataset(in_dir) -> PosedDataset:
    src = Path(in_dir)
    items = []
    with open(src / "poses.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            ki = rec["intrinsics"]
            k = CameraIntrinsics(
                focal=ki["focal"], cx=ki["cx"], cy=ki["cy"], width=ki["width"], height=ki["height"]
            )
            pose = Pose.from_matrix(np.asarray(rec["pose"], dtype=float).reshape(4, 4))
            rgb = image_io.read_png(src / f"{rec['id']}.png")
            depth = image_io.read_depth(src / f"{rec['id']}.dpth")
            items.append((RgbdImage(rgb=rgb, depth=depth, intrinsics=k), pose))
    return PosedDataset(items)


# ----------------------------------------------------------------- sampling


def mean_colour(ds: PosedDataset) -> np.ndarray:
    """Dataset mean RGB, quantized to the 8-bit grid the stored images use.

    Used to initialize the colour grid. Quantizing makes the init equal the
    observations bit-exactly wherever the scene is uniformly coloured, so the
    colour term starts silent there instead of feeding sign noise into the
    geometry through the surface-point chain rule.
    """
    total = np.zeros(3)
    pixels = 0
    for img, _ in ds.items:
        total += img.rgb.reshape(-1, 3).sum(axis=0)
        pixels += img.rgb.shape[0] * img.rgb.shape[1]
    return np.round(total / pixels * 255.0) / 255.0


def sample_batch(ds: PosedDataset, cfg: TrainConfig, rng: np.random.Generator) -> PixelBatch:
    """Uniform image/pixel subsample, without replacement within the batch."""
    k = ds.intrinsics
    n_img = min(cfg.batch_images, len(ds))
    n_pix = min(cfg.pixels_per_image, k.width * k.height)
    img_idx = rng.choice(len(ds), size=n_img, replace=False)
    unit = pixel_unit_dirs(k)

    origins, dirs, rgb, depth = [], [], [], []
    for ii in img_idx:
        img, pose = ds.items[ii]
        flat = rng.choice(k.width * k.height, size=n_pix, replace=False)
        j, i = np.divmod(flat, k.width)
        origins.append(np.broadcast_to(pose.t, (n_pix, 3)))
        dirs.append(unit[j, i] @ pose.r.T)
        rgb.append(img.rgb[j, i])
        depth.append(img.depth[j, i])
    return PixelBatch(
        origins=np.concatenate(origins),
        dirs=np.concatenate(dirs),
        rgb=np.concatenate(rgb),
        depth=np.concatenate(depth),
    )


# ------------------------------------------------------------ loss/gradients


def _loss_and_grads(vmap: VoxelMap, batch: PixelBatch, rcfg: RenderConfig, want_grads: bool):
    s1, s2 = vmap.scales.sigma_rgb, vmap.scales.sigma_depth
    m = len(batch)
    res = march_rays(vmap, batch.origins, batch.dirs, rcfg)
    rgb = np.full((m, 3), BG_GREY)

    grad_occ = np.zeros(vmap.occ.shape) if want_grads else None
    grad_col = np.zeros(vmap.col.shape) if want_grads else None

    h = res.hit
    if h.any():
        p_star = batch.origins[h] + res.k_star[h, None] * batch.dirs[h]
        col_raw, col_jac, idx_c, w_c = sample_col_grad(vmap, p_star)
        rgb[h] = np.clip(col_raw, 0.0, 1.0)
        if want_grads:
            p_minus = batch.origins[h] + res.k_minus[h, None] * batch.dirs[h]
            p_plus = batch.origins[h] + res.k_plus[h, None] * batch.dirs[h]
            _, _, idx_m, w_m = sample_occ_grad(vmap, p_minus)
            _, _, idx_p, w_p = sample_occ_grad(vmap, p_plus)

            s_d = _sign_nz(batch.depth[h] - res.k_star[h]) / s2
            inside = (col_raw > 0.0) & (col_raw < 1.0)
            s_c = _sign_nz(batch.rgb[h] - rgb[h]) / s1 * inside
            dcol_dk = np.einsum("mkd,md->mk", col_jac, batch.dirs[h])
            dll_dk = s_d + np.einsum("mk,mk->m", s_c, dcol_dk)

            dk_dfm, dk_dfp = kstar_grads(res, rcfg)
            # NLL = -ll, hence the negations; np.add.at keeps accumulation
            # deterministic regardless of duplicate node indices
            np.add.at(grad_occ.reshape(-1), idx_m, -(dll_dk * dk_dfm[h])[:, None] * w_m)
            np.add.at(grad_occ.reshape(-1), idx_p, -(dll_dk * dk_dfp[h])[:, None] * w_p)
            np.add.at(grad_col.reshape(-1, 3), idx_c, -s_c[:, None, :] * w_c[:, :, None])

    abs_rgb = np.abs(batch.rgb - rgb).sum()
    abs_d = np.abs(batch.depth - res.k_star).sum()
    loss = m * (3.0 * math.log(2.0 * s1) + math.log(2.0 * s2)) + abs_rgb / s1 + abs_d / s2

    grad_s2 = None
    if want_grads:
        # colour scale is tied: sigma_rgb = sigma_depth / ratio, so its
        # normalizer and residual terms fold into the sigma_depth gradient
        assert math.isclose(s1, s2 / COLOUR_SCALE_RATIO, rel_tol=1e-9), "gradients assume tied scales"
        grad_s2 = 4.0 * m / s2 - (COLOUR_SCALE_RATIO * abs_rgb + abs_d) / s2**2
    return float(loss), grad_occ, grad_col, grad_s2


def minibatch_loss(vmap: VoxelMap, batch: PixelBatch, rcfg: RenderConfig) -> float:
    """Negative sum of per-pixel emission log-densities over the batch."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    return _loss_and_grads(vmap, batch, rcfg, want_grads=False)[0]


def loss_gradients(vmap: VoxelMap, batch: PixelBatch, rcfg: RenderConfig):
    """(grad_occ, grad_col, grad_sigma_depth) of minibatch_loss.

    Grid gradients are dense arrays that are exactly zero outside the cells
    touched by sampled rays. Requires tied emission scales.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    _, grad_occ, grad_col, grad_s2 = _loss_and_grads(vmap, batch, rcfg, want_grads=True)
    return grad_occ, grad_col, grad_s2


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def like(params) -> "AdamState":
        shape = np.shape(params)
        return AdamState(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new params, mutates state."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient, and state shapes must match")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# ------------------------------------------------------------------ training


def _step_rng(seed: int, step: int) -> np.random.Generator:
    # one child stream per step: resuming from a checkpoint replays the
    # exact batch sequence of an uninterrupted run
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, step)))


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


def _save_checkpoint(path, step, occ, col, s2, states):
    tmp = str(path) + ".tmp"
    arrays = {"step": np.int64(step), "occ": occ, "col": col, "sigma2": np.float64(s2)}
    for name, st in states.items():
        arrays[f"{name}_m"] = st.m
        arrays[f"{name}_v"] = st.v
        arrays[f"{name}_t"] = np.int64(st.step)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _load_checkpoint(path, dims):
    with np.load(path) as z:
        if z["occ"].shape != dims:
            raise ValueError(f"checkpoint grid {z['occ'].shape} does not match bounds {dims}")
        states = {}
        for name in ("occ", "col", "s2"):
            states[name] = AdamState(m=z[f"{name}_m"], v=z[f"{name}_v"], step=int(z[f"{name}_t"]))
        return int(z["step"]), z["occ"].copy(), z["col"].copy(), float(z["sigma2"]), states


def learn_map(
    dataset: PosedDataset,
    bounds: MapBounds,
    cfg: TrainConfig,
    rcfg: RenderConfig | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    progress=None,
) -> VoxelMap:
    """Fit a map to the dataset by cfg.steps Adam iterations.

    If checkpoint_path exists, training resumes from it (bit-identically to
    an uninterrupted run). progress, when given, is called as
    progress(step, loss, sigma_depth) after every step.
    """
    rcfg = rcfg or default_render_config()
    dims = bounds.dims
    origin = np.asarray(bounds.lo, dtype=float)
    cell = np.full(3, bounds.cell)

    start = 0
    if checkpoint_path is not None and Path(checkpoint_path).exists():
        start, occ, col, s2, states = _load_checkpoint(checkpoint_path, dims)
    else:
        rng = _init_rng(cfg.seed)
        occ = rng.normal(rcfg.tau + OCC_INIT_OFFSET, OCC_INIT_STD, size=dims)
        col = np.empty(dims + (3,))
        col[:] = mean_colour(dataset)
        s2 = SIGMA_DEPTH_INIT
        states = {"occ": AdamState.like(occ), "col": AdamState.like(col), "s2": AdamState.like(s2)}

    for step in range(start, cfg.steps):
        scales = EmissionScales(sigma_rgb=s2 / COLOUR_SCALE_RATIO, sigma_depth=s2)
        vmap = VoxelMap(occ=occ, col=col, origin=origin, cell=cell, scales=scales)
        batch = sample_batch(dataset, cfg, _step_rng(cfg.seed, step))
        loss, g_occ, g_col, g_s2 = _loss_and_grads(vmap, batch, rcfg, want_grads=True)

        occ, _ = adam_step(occ, g_occ, states["occ"], cfg.learning_rate)
        col, _ = adam_step(col, g_col, states["col"], cfg.learning_rate)
        s2_new, _ = adam_step(np.float64(s2), np.float64(g_s2), states["s2"], cfg.scale_lr)
        s2 = max(float(s2_new), SIGMA_FLOOR)

        if progress is not None:
            progress(step, loss, s2)
        if checkpoint_path is not None and checkpoint_every > 0 and (step + 1) % checkpoint_every == 0:
            _save_checkpoint(checkpoint_path, step + 1, occ, col, s2, states)

    if checkpoint_path is not None and checkpoint_every > 0:
        _save_checkpoint(checkpoint_path, cfg.steps, occ, col, s2, states)
    return VoxelMap(
        occ=occ,
        col=col,
        origin=origin,
        cell=cell,
        scales=EmissionScales(sigma_rgb=s2 / COLOUR_SCALE_RATIO, sigma_depth=s2),
    )

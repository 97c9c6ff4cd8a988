"""Voxel grids with trilinear interpolation and their on-disk format.

A map stores one scalar occupancy grid and one RGB colour grid on the same
regular lattice of nodes. Values live on the nodes; queries interpolate the
eight surrounding nodes. Queries outside the lattice are clamped to the grid
hull (border replication), which keeps both values and spatial gradients
defined everywhere; the spatial gradient of a clamped coordinate is zero.

Occupancy is a raw real value with no squashing. Render-time thresholding
happens at the use sites. Fresh maps are zero occupancy and mid-grey colour.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

# Colour Laplace scale is tied to the depth scale by this fixed ratio.
COLOUR_SCALE_RATIO = 5.0

_MAGIC = b"VXNM"
_VERSION = 1


class VoxelMapFormatError(ValueError):
    """Base class for map-file format problems."""


class MapMagicError(VoxelMapFormatError):
    pass


class MapVersionError(VoxelMapFormatError):
    pass


class MapDimensionError(VoxelMapFormatError):
    pass


class MapTruncatedError(VoxelMapFormatError):
    pass


@dataclass
class EmissionScales:
    """Laplace scales of the emission model (colour per channel, depth)."""

    sigma_rgb: float
    sigma_depth: float

    def __post_init__(self):
        if self.sigma_rgb <= 0 or self.sigma_depth <= 0:
            raise ValueError("emission scales must be positive")

    @staticmethod
    def tied(sigma_depth: float) -> "EmissionScales":
        """Apply the tying rule sigma_rgb = sigma_depth / 5."""
        return EmissionScales(sigma_depth / COLOUR_SCALE_RATIO, sigma_depth)


@dataclass
class VoxelMap:
    """Occupancy + colour grids on a shared node lattice.

    occ: (nx, ny, nz) raw occupancy values.
    col: (nx, ny, nz, 3) colours, nominally in [0, 1].
    origin: world position of node (0, 0, 0).
    cell: per-axis node spacing (m).
    """

    occ: np.ndarray
    col: np.ndarray
    origin: np.ndarray
    cell: np.ndarray
    scales: EmissionScales = field(default_factory=lambda: EmissionScales.tied(2.4))

    def __post_init__(self):
        self.occ = np.asarray(self.occ)
        self.col = np.asarray(self.col)
        self.origin = np.asarray(self.origin, dtype=float)
        self.cell = np.asarray(self.cell, dtype=float)
        if self.occ.ndim != 3 or any(n < 2 for n in self.occ.shape):
            raise ValueError(f"occupancy grid must be (nx>=2, ny>=2, nz>=2), got {self.occ.shape}")
        if self.col.shape != self.occ.shape + (3,):
            raise ValueError(f"colour grid shape {self.col.shape} does not match {self.occ.shape}")
        if self.origin.shape != (3,) or self.cell.shape != (3,):
            raise ValueError("origin and cell must be 3-vectors")
        if np.any(self.cell <= 0):
            raise ValueError("cell sizes must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occ.shape  # type: ignore[return-value]

    @staticmethod
    def zeros(dims, origin, cell, scales: EmissionScales | None = None, dtype=np.float32) -> "VoxelMap":
        """Fresh map: zero occupancy, 0.5 grey colour."""
        nx, ny, nz = (int(d) for d in dims)
        return VoxelMap(
            occ=np.zeros((nx, ny, nz), dtype=dtype),
            col=np.full((nx, ny, nz, 3), 0.5, dtype=dtype),
            origin=np.asarray(origin, dtype=float),
            cell=np.asarray(cell, dtype=float),
            scales=scales if scales is not None else EmissionScales.tied(2.4),
        )

    def world_to_grid(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.origin) / self.cell

    def grid_to_world(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(idx, dtype=float) * self.cell + self.origin

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """(low, high) world corners of the node lattice hull."""
        high = self.origin + (np.array(self.dims) - 1) * self.cell
        return self.origin.copy(), high


# ------------------------------------------------------------- interpolation


def _interp_prep(vmap: VoxelMap, pts: np.ndarray, want_dw: bool = False):
    """Trilinear corner data for query points.

    Returns (flat_idx (M, 8), weights (M, 8), dw (M, 8, 3) or None).
    Corner c encodes offsets (bx, by, bz) with c = 4 bx + 2 by + bz.
    dw is the derivative of each weight w.r.t. the world point, zero along
    axes where the query is clamped to the hull.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    nx, ny, nz = vmap.dims
    g = (pts - vmap.origin) / vmap.cell
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=float)
    inside = (g > 0) & (g < hi)
    g = np.clip(g, 0.0, hi)
    i0 = np.minimum(g.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    f = g - i0

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    m = pts.shape[0]
    w = np.empty((m, 8))
    a = gx * gy
    b = gx * fy
    c = fx * gy
    d = fx * fy
    w[:, 0] = a * gz
    w[:, 1] = a * fz
    w[:, 2] = b * gz
    w[:, 3] = b * fz
    w[:, 4] = c * gz
    w[:, 5] = c * fz
    w[:, 6] = d * gz
    w[:, 7] = d * fz

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    off = np.array(
        [(bx * ny + by) * nz + bz for bx in (0, 1) for by in (0, 1) for bz in (0, 1)],
        dtype=np.int64,
    )
    # note corner order above matches off: c = 4bx + 2by + bz
    idx = base[:, None] + off[None, :]

    if not want_dw:
        return idx, w, None

    sx = inside[:, 0] / vmap.cell[0]
    sy = inside[:, 1] / vmap.cell[1]
    sz = inside[:, 2] / vmap.cell[2]
    dw = np.empty((m, 8, 3))
    yz = np.empty((m, 4))
    yz[:, 0] = gy * gz
    yz[:, 1] = gy * fz
    yz[:, 2] = fy * gz
    yz[:, 3] = fy * fz
    for c_i in range(8):
        bx, by, bz = (c_i >> 2) & 1, (c_i >> 1) & 1, c_i & 1
        px = fx if bx else gx
        py = fy if by else gy
        pz = fz if bz else gz
        dw[:, c_i, 0] = (1.0 if bx else -1.0) * yz[:, 2 * by + bz] * sx
        dw[:, c_i, 1] = (1.0 if by else -1.0) * px * pz * sy
        dw[:, c_i, 2] = (1.0 if bz else -1.0) * px * py * sz
    return idx, w, dw


def _as_batch(pts):
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


def sample_occ(vmap: VoxelMap, pts: np.ndarray):
    """Trilinear occupancy at world points (3,) or (M, 3)."""
    p, single = _as_batch(pts)
    idx, w, _ = _interp_prep(vmap, p)
    vals = np.take(vmap.occ.ravel(), idx).astype(float)
    out = np.einsum("mc,mc->m", w, vals)
    return float(out[0]) if single else out


def sample_col(vmap: VoxelMap, pts: np.ndarray):
    """Trilinear colour at world points; (3,) -> (3,), (M, 3) -> (M, 3)."""
    p, single = _as_batch(pts)
    idx, w, _ = _interp_prep(vmap, p)
    vals = np.take(vmap.col.reshape(-1, 3), idx, axis=0).astype(float)
    out = np.einsum("mc,mcd->md", w, vals)
    return out[0] if single else out


def sample_occ_grad(vmap: VoxelMap, pts: np.ndarray):
    """Occupancy with spatial gradient and sparse cell data.

    Returns (value (M,), dvalue_dp (M, 3), flat_idx (M, 8), weights (M, 8)).
    """
    p, _ = _as_batch(pts)
    idx, w, dw = _interp_prep(vmap, p, want_dw=True)
    vals = np.take(vmap.occ.ravel(), idx).astype(float)
    value = np.einsum("mc,mc->m", w, vals)
    grad = np.einsum("mc,mcd->md", vals, dw)
    return value, grad, idx, w


def sample_col_grad(vmap: VoxelMap, pts: np.ndarray):
    """Colour with spatial Jacobian and sparse cell data.

    Returns (value (M, 3), dvalue_dp (M, 3, 3) [channel, axis], idx, weights).
    """
    p, _ = _as_batch(pts)
    idx, w, dw = _interp_prep(vmap, p, want_dw=True)
    vals = np.take(vmap.col.reshape(-1, 3), idx, axis=0).astype(float)
    value = np.einsum("mc,mck->mk", w, vals)
    jac = np.einsum("mck,mcd->mkd", vals, dw)
    return value, jac, idx, w


# ------------------------------------------------------------------- slices


@dataclass(frozen=True)
class OccupancySlice:
    """Horizontal occupancy cut used by the planner."""

    occupied: np.ndarray  # (nx, ny) bool
    points: np.ndarray  # (P, 2) world xy of occupied cells
    origin: np.ndarray  # (2,) world xy of cell (0, 0)
    cell: np.ndarray  # (2,) xy spacing
    height: float
    tau: float


def occupancy_slice(vmap: VoxelMap, height: float, tau: float) -> OccupancySlice:
    """Threshold the map at a horizontal plane; cells are the xy node lattice."""
    lo, hi = vmap.extent()
    if not (lo[2] <= height <= hi[2]):
        raise ValueError(f"slice height {height} outside map z-extent [{lo[2]}, {hi[2]}]")
    nx, ny, _ = vmap.dims
    xs = vmap.origin[0] + np.arange(nx) * vmap.cell[0]
    ys = vmap.origin[1] + np.arange(ny) * vmap.cell[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(height))], axis=1)
    vals = sample_occ(vmap, pts).reshape(nx, ny)
    occupied = vals >= tau
    pts_xy = np.stack([gx[occupied], gy[occupied]], axis=1)
    return OccupancySlice(
        occupied=occupied,
        points=pts_xy,
        origin=vmap.origin[:2].copy(),
        cell=vmap.cell[:2].copy(),
        height=float(height),
        tau=float(tau),
    )


# ------------------------------------------------------------------ file IO

# Header: magic, version u8, dims 3 x u32 LE, origin 3 x f64 LE,
# cell 3 x f64 LE, sigma_depth f64 LE. Payload: occ f32 LE x-fastest,
# then colour f32 LE x-fastest with interleaved rgb per node.
_HEADER = struct.Struct("<4sB3I3d3dd")


def save_map(vmap: VoxelMap, path: str | os.PathLike) -> None:
    """Write the map atomically (temp file + rename)."""
    nx, ny, nz = vmap.dims
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        nx,
        ny,
        nz,
        *vmap.origin.tolist(),
        *vmap.cell.tolist(),
        float(vmap.scales.sigma_depth),
    )
    occ = np.ascontiguousarray(vmap.occ.transpose(2, 1, 0), dtype="<f4")
    col = np.ascontiguousarray(vmap.col.transpose(2, 1, 0, 3), dtype="<f4")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(occ.tobytes())
        fh.write(col.tobytes())
    os.replace(tmp, path)


def load_map(path: str | os.PathLike) -> VoxelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise MapTruncatedError(f"file too short for header: {len(raw)} bytes")
    magic, version, nx, ny, nz, ox, oy, oz, cx, cy, cz, sigma_depth = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MapMagicError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise MapVersionError(f"unsupported version {version}")
    if min(nx, ny, nz) < 2 or nx * ny * nz > 2**31:
        raise MapDimensionError(f"bad dims ({nx}, {ny}, {nz})")
    n = nx * ny * nz
    expect = _HEADER.size + 4 * n + 12 * n
    if len(raw) < expect:
        raise MapTruncatedError(f"payload truncated: have {len(raw)}, need {expect}")
    if len(raw) > expect:
        raise VoxelMapFormatError(f"trailing data: have {len(raw)}, expected {expect}")
    occ = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    col = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=_HEADER.size + 4 * n)
    occ = occ.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
    col = col.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).copy()
    if sigma_depth <= 0:
        raise VoxelMapFormatError(f"non-positive emission scale {sigma_depth}")
    return VoxelMap(
        occ=occ,
        col=col,
        origin=np.array([ox, oy, oz]),
        cell=np.array([cx, cy, cz]),
        scales=EmissionScales.tied(sigma_depth),
    )

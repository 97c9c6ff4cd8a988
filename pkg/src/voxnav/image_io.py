"""PNG and raw-float image files.

Colour images are 8-bit PNG. Depth images are a raw little-endian float32
format: magic "DPTH", u32 width, u32 height, then height*width values in
raster order (row by row). Depth values are Euclidean ray distances in
meters, matching the renderer and simulator output.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

_DEPTH_MAGIC = b"DPTH"
_DEPTH_HEADER = struct.Struct("<4sII")


class DepthFormatError(ValueError):
    pass


def write_png(rgb: np.ndarray, path: str | os.PathLike) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG, atomically."""
    rgb = np.asarray(rgb, dtype=float)
    u8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    tmp = f"{path}.tmp.{os.getpid()}"
    Image.fromarray(u8, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG into an (H, W, 3) float image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_depth(depth: np.ndarray, path: str | os.PathLike) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(_DEPTH_MAGIC, w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_depth(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DEPTH_HEADER.size:
        raise DepthFormatError("file too short for header")
    magic, w, h = _DEPTH_HEADER.unpack_from(raw)
    if magic != _DEPTH_MAGIC:
        raise DepthFormatError(f"bad magic {magic!r}")
    expect = _DEPTH_HEADER.size + 4 * w * h
    if len(raw) != expect:
        raise DepthFormatError(f"have {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float64)

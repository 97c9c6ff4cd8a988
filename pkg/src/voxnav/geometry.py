"""Rigid-body and camera geometry.

Conventions used throughout the package:

- World frame: right-handed, z up. The agent moves in the x-y plane.
- Body frame: x forward, y left, z up. The agent state is planar
  (x, y, heading); heading is the rotation about world z, wrapped to
  (-pi, pi].
- Camera frame: x right, y down, z along the optical axis. The fixed
  camera mount (``DEFAULT_MOUNT_QUAT``, wxyz order) turns the optical
  axis onto the body forward axis, so at heading 0 the camera looks
  along world +x.
- Pixels: pixel (i, j) has i as the column (x) and j as the row (y)
  coordinate; image arrays are indexed ``img[j, i]``. The ray of pixel
  (i, j) passes exactly through (i, j), no half-pixel offset.
- Twists are 6-vectors with the translational part first:
  xi = (rho_x, rho_y, rho_z, phi_x, phi_y, phi_z).
- ``relative_pose(a, b)`` returns T = a^-1 * b, i.e. T maps points
  expressed in frame b into frame a. The tracker uses it with
  a = previous camera, b = current camera, so T maps current-frame
  points into the previous frame.
- Depth images store the Euclidean distance along the (unit-norm) pixel
  ray, not the camera-frame z coordinate. ``backproject`` is the plain
  pinhole inverse and therefore takes a z-depth; to lift a ray-distance
  depth map use ``camera_points``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Below this rotation angle exp/log coefficients use second-order Taylor
# expansions: the closed forms divide by 1 - cos(theta), which underflows in
# float64 well before the angle itself does.
SMALL_ANGLE = 1e-4
# Rotations closer than this to pi have no well-defined log axis for our use.
PI_ANGLE_MARGIN = 1e-6

# Camera-to-body mount orientation, quaternion in (w, x, y, z) order.
# Maps camera (x right, y down, z forward) onto body (x fwd, y left, z up).
DEFAULT_MOUNT_QUAT = (0.5, -0.5, 0.5, -0.5)


class DegenerateRotationError(ValueError):
    """Rotation angle at pi: the log axis is not unique."""


def wrap_angle(a):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.isscalar(a) or getattr(a, "shape", None) == () else w


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``apply(p) = r @ p + t`` maps local points to parent."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {r.shape}, {t.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.r @ other.r, self.r @ other.t + self.t)

    def inverse(self) -> "Pose":
        rt = self.r.T
        return Pose(rt, -rt @ self.t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.r.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"bad homogeneous matrix shape {m.shape}")
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; Taylor branch below SMALL_ANGLE."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    w = skew(phi)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * w2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp. Raises DegenerateRotationError at angle pi."""
    r = np.asarray(r, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if math.pi - theta < PI_ANGLE_MARGIN:
        raise DegenerateRotationError("rotation angle at pi, axis not unique")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < SMALL_ANGLE:
        # |vee| = sin(theta); acos is too coarse here, rescale from vee itself
        s2 = float(vee @ vee)
        return vee * (1.0 + s2 / 6.0)
    return (theta / math.sin(theta)) * vee


def _so3_v(phi: np.ndarray) -> np.ndarray:
    # Left Jacobian of SO(3): translation factor of the SE(3) exponential.
    theta = float(np.linalg.norm(phi))
    w = skew(phi)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - math.cos(theta)) / theta**2
        b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * w + b * w2


def _so3_v_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    w = skew(phi)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = (1.0 - (theta * math.sin(theta)) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * w + c * w2


def so3_jac_right_inv(e: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at rotation vector e.

    Satisfies log(exp(e_hat) exp(d_hat)) ~ e + Jr_inv(e) d for small d.
    """
    e = np.asarray(e, dtype=float)
    theta = float(np.linalg.norm(e))
    w = skew(e)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * w + c * w2


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist (rho, phi) -> Pose."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"twist must have shape (6,), got {xi.shape}")
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _so3_v(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp for rotation angles below pi."""
    phi = so3_log(pose.r)
    rho = _so3_v_inv(phi) @ pose.t
    return np.concatenate([rho, phi])


def relative_pose(a: Pose, b: Pose) -> Pose:
    """T = a^-1 * b: maps points in frame b into frame a."""
    return a.inverse().compose(b)


def quat_to_rot(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = (float(c) for c in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def default_mount() -> Pose:
    """Camera pose in the body frame (rotation only, no lever arm)."""
    return Pose(quat_to_rot(DEFAULT_MOUNT_QUAT), np.zeros(3))


@dataclass(frozen=True)
class AgentState:
    """Planar pose of the agent: position (m) and heading (rad, wrapped)."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    """One step of control: turn rate, move direction (absolute), speed.

    Units: rad/step, rad, m/step. ``speed >= 0``; when speed > 0 the move
    direction must lie within the alignment cone around the heading, which
    ``clamp_control`` enforces.
    """

    turn: float
    move_dir: float
    speed: float


@dataclass(frozen=True)
class ControlLimits:
    max_turn: float
    max_speed: float
    align: float

    @staticmethod
    def for_body(body_length: float) -> "ControlLimits":
        return ControlLimits(
            max_turn=math.radians(11.5),
            max_speed=0.8 * body_length,
            align=math.radians(5.0),
        )


def clamp_control(u: Control, heading: float, lim: ControlLimits) -> Control:
    """Clamp a control into the valid set for the given heading."""
    off = wrap_angle(u.move_dir - heading)
    if (
        abs(u.turn) <= lim.max_turn
        and 0.0 <= u.speed <= lim.max_speed
        and abs(off) <= lim.align
    ):
        return u
    turn = float(np.clip(u.turn, -lim.max_turn, lim.max_turn))
    speed = float(np.clip(u.speed, 0.0, lim.max_speed))
    move_dir = heading + float(np.clip(off, -lim.align, lim.align))
    return Control(turn=turn, move_dir=wrap_angle(move_dir), speed=speed)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; square pixels, no skew, no distortion."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]]
        )


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(focal=150.0, cx=160.0, cy=120.0, width=320, height=240)


def agent_to_camera(state: AgentState, mount: Pose, body_height: float) -> Pose:
    """World camera pose of an agent state: planar body pose composed with mount."""
    ch, sh = math.cos(state.heading), math.sin(state.heading)
    r_body = np.array([[ch, -sh, 0.0], [sh, ch, 0.0], [0.0, 0.0, 1.0]])
    body = Pose(r_body, np.array([state.x, state.y, float(body_height)]))
    return body.compose(mount)


def camera_to_agent(cam: Pose, mount: Pose) -> AgentState:
    """Project a camera pose back to the planar agent state (drops z/roll/pitch)."""
    r_body = cam.r @ mount.r.T
    heading = math.atan2(r_body[1, 0], r_body[0, 0])
    return AgentState(x=cam.t[0], y=cam.t[1], heading=heading)


def project(p_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points (..., 3) -> pixels (..., 2); NaN where z <= 0."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = K.focal * p[..., 0] / z + K.cx
        py = K.focal * p[..., 1] / z + K.cy
    pix = np.stack([px, py], axis=-1)
    pix[z <= 0] = np.nan
    return pix


def backproject(pixel, depth, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole inverse: pixel (..., 2) and z-depth -> camera point (..., 3).

    Depth here is the camera-frame z coordinate. NaN where depth <= 0.
    """
    pixel = np.asarray(pixel, dtype=float)
    d = np.asarray(depth, dtype=float)
    x = (pixel[..., 0] - K.cx) / K.focal
    y = (pixel[..., 1] - K.cy) / K.focal
    p = np.stack([x, y, np.ones_like(x)], axis=-1) * d[..., None]
    p = np.where(d[..., None] > 0, p, np.nan)
    return p


@lru_cache(maxsize=16)
def _unit_dir_cache(K: CameraIntrinsics):
    i = np.arange(K.width, dtype=float)
    j = np.arange(K.height, dtype=float)
    x = (i[None, :] - K.cx) / K.focal
    y = (j[:, None] - K.cy) / K.focal
    dirs = np.stack(
        [np.broadcast_to(x, (K.height, K.width)), np.broadcast_to(y, (K.height, K.width)),
         np.ones((K.height, K.width))],
        axis=-1,
    )
    norms = np.linalg.norm(dirs, axis=-1)
    unit = dirs / norms[..., None]
    unit.flags.writeable = False
    norms.flags.writeable = False
    return unit, norms

def pixel_unit_dirs(K: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions in the camera frame, shape (H, W, 3). Cached."""
    return _unit_dir_cache(K)[0]


def camera_points(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Lift a ray-distance depth image (H, W) to camera-frame points (H, W, 3)."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
    return pixel_unit_dirs(K) * depth[..., None]

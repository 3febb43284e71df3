"""Pinhole camera: pose, ray generation and point projection.

Conventions (shared verbatim by the native kernels and the browser client):
right-handed, camera looks along -Z in camera space, +X right, +Y up, pixel
(0, 0) top-left, rays pass through pixel centers.  Depth is the euclidean
eye-space distance along the (normalized) ray.  The quaternion rotates
camera-space vectors into world space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray  # (3,) float64
    orientation: np.ndarray  # (w, x, y, z) float64, unit
    vertical_fov: float = 60.0  # degrees
    near: float = 0.05
    far: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        q = np.asarray(self.orientation, dtype=np.float64)
        object.__setattr__(self, "orientation", q)
        if abs(float(q @ q) - 1.0) > 1e-6:
            raise ValueError(f"orientation quaternion not normalized: |q|^2 = {q @ q}")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if not (0 < self.vertical_fov < 180):
            raise ValueError("vertical_fov must be in (0, 180) degrees")

    def rotation(self) -> np.ndarray:
        """World-from-camera rotation matrix."""
        return quat_to_matrix(self.orientation)

    def tan_half_fov(self) -> float:
        return math.tan(math.radians(self.vertical_fov) / 2.0)

    def same_pose(self, other: "CameraPose") -> bool:
        return (
            bool(np.array_equal(self.position, other.position))
            and bool(np.array_equal(self.orientation, other.orientation))
            and self.vertical_fov == other.vertical_fov
            and self.near == other.near
            and self.far == other.far
        )

    def pack(self, aspect: float) -> np.ndarray:
        """11 float64: px py pz qw qx qy qz fov_deg near far aspect."""
        return np.array(
            [*self.position, *self.orientation, self.vertical_fov, self.near, self.far, aspect],
            dtype=np.float64,
        )

    @staticmethod
    def unpack(values: np.ndarray) -> "CameraPose":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (11,):
            raise ValueError(f"expected 11 camera values, got shape {v.shape}")
        return CameraPose(v[0:3], v[3:7], float(v[7]), float(v[8]), float(v[9]))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z], dtype=np.float64)
    return q / math.sqrt(float(q @ q))


def look_at(
    position,
    target,
    up=(0.0, 1.0, 0.0),
    vertical_fov: float = 60.0,
    near: float = 0.05,
    far: float = 1000.0,
) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right = right / nr
    true_up = np.cross(right, fwd)
    m = np.column_stack([right, true_up, -fwd])
    return CameraPose(position, matrix_to_quat(m), vertical_fov, near, far)


def ray_directions(width: int, height: int, rot: np.ndarray, tan_half: float, aspect: float):
    """Per-pixel normalized world-space ray directions, (h, w, 3) float64.

    The arithmetic (operand order included) is pinned: the native kernel
    re-derives the same rays scalar-wise and must agree bit-for-bit.
    """
    thx = tan_half * aspect
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    u = (xs + 0.5) * 2.0 / width - 1.0
    v = 1.0 - (ys + 0.5) * 2.0 / height
    dx = np.broadcast_to((u * thx)[None, :], (height, width))
    dy = np.broadcast_to((v * tan_half)[:, None], (height, width))
    dz = np.full((height, width), -1.0)
    wx = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2] * dz
    wy = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2] * dz
    wz = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2] * dz
    inv = 1.0 / np.sqrt(wx * wx + wy * wy + wz * wz)
    return np.stack([wx * inv, wy * inv, wz * inv], axis=-1)


def camera_rays(cam: CameraPose, width: int, height: int):
    return ray_directions(width, height, cam.rotation(), cam.tan_half_fov(), width / height)


def project_points(cam: CameraPose, points: np.ndarray, width: int, height: int):
    """World points -> (px, py, eye_distance, valid).  px/py are continuous
    pixel coordinates (pixel centers at integers)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = cam.rotation()
    rel = pts - cam.position[None, :]
    pc = rel @ rot  # == rot.T applied row-wise
    zneg = -pc[:, 2]
    valid = zneg > 1e-12
    safe = np.where(valid, zneg, 1.0)
    th = cam.tan_half_fov()
    aspect = width / height
    u = pc[:, 0] / safe / (th * aspect)
    v = pc[:, 1] / safe / th
    px = (u + 1.0) * 0.5 * width - 0.5
    py = (1.0 - v) * 0.5 * height - 0.5
    dist = np.sqrt(pc[:, 0] ** 2 + pc[:, 1] ** 2 + pc[:, 2] ** 2)
    return px, py, dist, valid


def orbit_pose(
    center,
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    vertical_fov: float = 60.0,
    near: float = 0.05,
    far: float = 1000.0,
) -> CameraPose:
    """Orbit camera around a center point (the cockpit's camera model)."""
    center = np.asarray(center, dtype=np.float64)
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    offset = np.array(
        [
            distance * math.cos(el) * math.sin(az),
            distance * math.sin(el),
            distance * math.cos(el) * math.cos(az),
        ]
    )
    return look_at(center + offset, center, (0, 1, 0), vertical_fov, near, far)

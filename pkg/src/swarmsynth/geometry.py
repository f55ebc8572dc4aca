"""Poses, pinhole cameras and ray-bundle generation.

Conventions: world coordinates measure voxels (one voxel edge = one world
unit), the grid occupies [0, dims] per axis. Quaternions are scalar-first
(w, x, y, z) unit quaternions. The camera frame is right-handed with +z
forward and +x to the right; pixel rows advance along camera +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """A 6-DoF viewpoint: position plus unit orientation quaternion."""

    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        n = math.sqrt(sum(q * q for q in self.orientation))
        if abs(n - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"orientation quaternion norm {n} is not 1")

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters; fov is the full horizontal field of view."""

    width: int = 32
    height: int = 32
    fov: float = math.radians(60.0)
    near: float = 0.5
    far: float = 64.0

    def __post_init__(self) -> None:
        if not (0 < self.near < self.far):
            raise ValueError("camera needs 0 < near < far")
        if not (0 < self.fov < math.pi):
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")


def normalize_quat(q) -> tuple[float, float, float, float]:
    v = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    w, x, y, z = (v / n).tolist()
    return (w, x, y, z)


def quat_from_matrix(m: np.ndarray) -> tuple[float, float, float, float]:
    """Unit quaternion for a proper rotation matrix (Shepperd's method)."""
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
    return normalize_quat((w, x, y, z))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose at `eye` with the camera +z axis aimed at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at target coincides with eye")
    z = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(upv, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Pose(tuple(eye.tolist()), quat_from_matrix(rot))


def camera_rays(pose: Pose, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray bundle for every pixel.

    Returns (origins, directions), each (H*W, 3); directions are unit
    vectors, pixel order row-major.
    """
    tan_half = math.tan(cam.fov / 2.0)
    cols = (2.0 * (np.arange(cam.width) + 0.5) / cam.width - 1.0) * tan_half
    rows = (
        (2.0 * (np.arange(cam.height) + 0.5) / cam.height - 1.0)
        * tan_half
        * (cam.height / cam.width)
    )
    cx, cy = np.meshgrid(cols, rows)
    dirs_cam = np.stack([cx, cy, np.ones_like(cx)], axis=-1).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    rot = pose.rotation_matrix()
    dirs_world = dirs_cam @ rot.T
    origins = np.broadcast_to(
        np.asarray(pose.position, dtype=np.float64), dirs_world.shape
    ).copy()
    return origins, dirs_world

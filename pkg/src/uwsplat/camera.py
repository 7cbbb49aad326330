"""Pinhole camera with a world-to-camera pose."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions in (w, x, y, z) order.

    Accepts shape (4,) or (N, 4); the result is (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` (single matrix or a stack), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 3:
        return np.stack([rotmat_to_quat(m) for m in R])
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s]
    elif m00 > m11 and m00 > m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2
        q = [(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s]
    elif m11 > m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2
        q = [(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s]
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2
        q = [(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera (quaternion, translation) for a camera at `center` looking at `target`.

    Uses the OpenCV/COLMAP axis convention: +z forward, +x right, +y down.
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows are camera axes in world coords
    q = rotmat_to_quat(R)
    return q, -quat_to_rotmat(q) @ center


@dataclass
class Camera:
    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"camera quaternion not unit norm (|q|={n})")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def project_point(self, point) -> np.ndarray:
        t = self.world_to_camera(np.asarray(point, dtype=np.float64)[None])[0]
        return np.array([self.fx * t[0] / t[2] + self.cx, self.fy * t[1] / t[2] + self.cy])

    def with_pose(self, rotation, translation, id=None) -> "Camera":
        return Camera(
            self.id if id is None else id, self.width, self.height,
            self.fx, self.fy, self.cx, self.cy, rotation, translation,
        )

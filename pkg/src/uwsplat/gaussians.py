"""Learnable 3D Gaussians: covariance, projection to screen space, and their gradients."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .camera import Camera, quat_to_rotmat
from .errors import DegenerateDirection
from .sh import degree_from_basis, num_basis

LOWPASS_EPS = 0.3
ZNEAR = 0.01
CULL_SIGMAS = 3.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianCloud:
    positions: np.ndarray        # (N, 3)
    rotations: np.ndarray        # (N, 4) w, x, y, z
    log_scales: np.ndarray       # (N, 3)
    logit_opacities: np.ndarray  # (N,)
    sh_coeffs: np.ndarray        # (N, 3, B)
    grad_accum: np.ndarray = None
    coverage_accum: np.ndarray = None
    view_accum: np.ndarray = None
    max_screen_radius: np.ndarray = None

    def __post_init__(self):
        n = self.positions.shape[0]
        dt = self.positions.dtype
        for name in ("grad_accum", "coverage_accum", "view_accum", "max_screen_radius"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=dt))

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def sh_degree(self) -> int:
        return degree_from_basis(self.sh_coeffs.shape[-1])

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.logit_opacities)

    @classmethod
    def param_names(cls):
        return ("positions", "rotations", "log_scales", "logit_opacities", "sh_coeffs")

    @classmethod
    def from_points(cls, points, colors, sh_degree=3, init_scale=None, opacity=0.1,
                    dtype=np.float32):
        """Initialize isotropic Gaussians at `points` with DC color matching `colors`.

        The default scale is the mean distance to the 3 nearest neighbours,
        as is customary for sparse-point initialization.
        """
        from scipy.spatial import cKDTree

        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if init_scale is None:
            k = min(4, n)
            dist, _ = cKDTree(points).query(points, k=k)
            d = dist[:, 1:].mean(axis=1) if k > 1 else np.ones(n)
            init_scale = np.maximum(d, 1e-7)
        scales = np.broadcast_to(np.asarray(init_scale, dtype=np.float64), (n,))
        sh = np.zeros((n, 3, num_basis(sh_degree)))
        sh[:, :, 0] = (np.asarray(colors, dtype=np.float64) - 0.5) / 0.28209479177387814
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(
            positions=points.astype(dtype),
            rotations=rot.astype(dtype),
            log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1).astype(dtype),
            logit_opacities=np.full(n, inverse_sigmoid(opacity), dtype=dtype),
            sh_coeffs=sh.astype(dtype),
        )

    def copy(self) -> "GaussianCloud":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def astype(self, dtype) -> "GaussianCloud":
        return replace(self, **{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        return replace(self, **{f.name: getattr(self, f.name)[keep] for f in fields(self)})

    def extend(self, other: "GaussianCloud") -> "GaussianCloud":
        return replace(self, **{
            f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
            for f in fields(self)
        })

    def normalize_rotations(self):
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= np.maximum(n, 1e-12)

    def reset_accumulators(self):
        for name in ("grad_accum", "coverage_accum", "view_accum", "max_screen_radius"):
            getattr(self, name)[:] = 0


# ---------------------------------------------------------------------------
# covariance


def covariance_from(rotation, scale):
    """3D covariance R S S^T R^T from unit quaternion(s) and per-axis scale(s)."""
    R = quat_to_rotmat(rotation)
    s = np.asarray(scale, dtype=np.float64)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def _drot_dquat(q):
    """d R_ij / d q_k for unit quaternions q (N, 4): returns (N, 4, 3, 3)."""
    w, x, y, z = q.T
    o = np.zeros_like(w)
    dw = np.stack([o, -2 * z, 2 * y, 2 * z, o, -2 * x, -2 * y, 2 * x, o], -1)
    dx = np.stack([o, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], -1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, o, 2 * z, -2 * w, 2 * z, -4 * y], -1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, o], -1)
    return np.stack([dw, dx, dy, dz], 1).reshape(-1, 4, 3, 3)


def covariance_backward(rotations, log_scales, d_cov):
    """Backprop a full-matrix gradient on Sigma to raw quaternions and log-scales.

    `rotations` may be unnormalized; the normalization is differentiated too.
    """
    q = np.asarray(rotations, dtype=np.float64)
    qn_norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qn_norm
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    R = quat_to_rotmat(qn)
    M = R * s[:, None, :]
    G = np.asarray(d_cov, dtype=np.float64)
    dM = (G + np.swapaxes(G, 1, 2)) @ M
    dR = dM * s[:, None, :]
    ds = np.einsum("nij,nij->nj", dM, R)
    d_log_s = ds * s
    d_qn = np.einsum("nkij,nij->nk", _drot_dquat(qn), dR)
    d_q = (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / qn_norm
    return d_q, d_log_s


# ---------------------------------------------------------------------------
# geometry relative to the camera


def depth_and_dir(positions, camera: Camera):
    """Distance z and unit direction from the camera center to each Gaussian center."""
    p = np.asarray(positions, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    d = p - camera.center
    z = np.linalg.norm(d, axis=1)
    if np.any(z < 1e-9):
        raise DegenerateDirection("Gaussian center coincides with the camera center")
    theta = d / z[:, None]
    if single:
        return z[0], theta[0]
    return z, theta


def depth_and_dir_backward(z, theta, d_z, d_theta):
    """Chain gradients on (z, theta) back to world positions."""
    d_theta = np.asarray(d_theta, dtype=np.float64)
    radial = np.sum(theta * d_theta, axis=1, keepdims=True)
    return np.asarray(d_z)[:, None] * theta + (d_theta - theta * radial) / z[:, None]


@dataclass
class Projection:
    """Screen-space splats for one camera plus what the backward pass needs."""

    mean2d: np.ndarray    # (N, 2) pixels
    cov2d: np.ndarray     # (N, 3) packed (a, b, c), low-pass floor included
    radius: np.ndarray    # (N,) pixels, 3 sigma of the major axis
    visible: np.ndarray   # (N,) bool
    t_cam: np.ndarray     # (N, 3) camera-frame centers
    cov3d: np.ndarray = field(repr=False, default=None)
    J: np.ndarray = field(repr=False, default=None)
    camera: Camera = field(repr=False, default=None)


def project(positions, rotations, log_scales, camera: Camera,
            lowpass=LOWPASS_EPS, znear=ZNEAR) -> Projection:
    """EWA projection of 3D Gaussians with culling.

    A Gaussian is culled when its camera-frame depth is <= znear or its 3-sigma
    screen footprint lies completely outside the frame.
    """
    mu = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    s = np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    W = camera.R
    t = mu @ W.T + camera.translation
    tx, ty, tz = t.T
    front = tz > znear
    tz_safe = np.where(front, tz, 1.0)
    fx, fy = camera.fx, camera.fy
    n = len(mu)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / tz_safe
    J[:, 0, 2] = -fx * tx / tz_safe**2
    J[:, 1, 1] = fy / tz_safe
    J[:, 1, 2] = -fy * ty / tz_safe**2
    cov3d = covariance_from(q, s)
    T = J @ W
    c2 = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d = np.stack([c2[:, 0, 0] + lowpass, c2[:, 0, 1], c2[:, 1, 1] + lowpass], -1)
    mean2d = np.stack([fx * tx / tz_safe + camera.cx, fy * ty / tz_safe + camera.cy], -1)
    a, b, c = cov2d.T
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = CULL_SIGMAS * np.sqrt(lam_max)
    inside = (
        (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width)
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height)
    )
    visible = front & inside
    radius = np.where(visible, radius, 0.0)
    return Projection(mean2d, cov2d, radius, visible, t, cov3d, J, camera)


def project_backward(proj: Projection, positions, rotations, log_scales, d_mean2d, d_cov2d):
    """Gradients of the projection w.r.t. positions, raw quaternions and log-scales.

    `d_cov2d` is packed (a, b, c) where b is the shared off-diagonal entry.
    Culled Gaussians receive zero gradient.
    """
    cam = proj.camera
    W = cam.R
    vis = proj.visible
    tx, ty, tz = proj.t_cam.T
    tz = np.where(vis, tz, 1.0)
    fx, fy = cam.fx, cam.fy
    dm = np.where(vis[:, None], np.asarray(d_mean2d, dtype=np.float64), 0.0)
    dc = np.where(vis[:, None], np.asarray(d_cov2d, dtype=np.float64), 0.0)
    G = np.empty((len(dc), 2, 2))
    G[:, 0, 0] = dc[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * dc[:, 1]
    G[:, 1, 1] = dc[:, 2]

    J = proj.J
    Mc = W @ proj.cov3d @ W.T  # camera-frame covariance
    d_Mc = np.swapaxes(J, 1, 2) @ G @ J
    d_J = 2.0 * G @ J @ Mc
    d_cov3d = W.T @ d_Mc @ W

    d_t = np.zeros((len(dc), 3))
    d_t[:, 0] = dm[:, 0] * fx / tz
    d_t[:, 1] = dm[:, 1] * fy / tz
    d_t[:, 2] = -dm[:, 0] * fx * tx / tz**2 - dm[:, 1] * fy * ty / tz**2
    d_t[:, 0] += -d_J[:, 0, 2] * fx / tz**2
    d_t[:, 1] += -d_J[:, 1, 2] * fy / tz**2
    d_t[:, 2] += (-d_J[:, 0, 0] * fx / tz**2 + 2 * d_J[:, 0, 2] * fx * tx / tz**3
                  - d_J[:, 1, 1] * fy / tz**2 + 2 * d_J[:, 1, 2] * fy * ty / tz**3)
    d_pos = d_t @ W
    d_q, d_log_s = covariance_backward(rotations, log_scales, d_cov3d)
    return d_pos, d_q, d_log_s

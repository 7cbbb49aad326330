"""Real spherical harmonics up to degree 3 for view-dependent color."""
from __future__ import annotations

import numpy as np

from .errors import DegreeOutOfRange

MAX_SH_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_basis(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_basis(n_basis: int) -> int:
    d = int(round(np.sqrt(n_basis))) - 1
    if num_basis(d) != n_basis or d > MAX_SH_DEGREE:
        raise DegreeOutOfRange(f"{n_basis} coefficients is not a valid SH basis size")
    return d


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Evaluate the SH basis (and optionally its Jacobian) at `dirs`.

    Args:
        dirs: (N, 3) directions. Normalization is the caller's job; the
            polynomial form is differentiated as-is.
        degree: 0..3.
        with_grad: also return d(basis)/d(dirs) with shape (N, B, 3).

    Returns:
        (N, B) basis values, or a (values, jacobian) pair.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise DegreeOutOfRange(f"SH degree {degree} outside 0..{MAX_SH_DEGREE}")
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    B = num_basis(degree)
    Y = np.empty((n, B))
    dY = np.zeros((n, B, 3)) if with_grad else None
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    Y[:, 0] = C0
    if degree >= 1:
        Y[:, 1] = -C1 * y
        Y[:, 2] = C1 * z
        Y[:, 3] = -C1 * x
        if with_grad:
            dY[:, 1, 1] = -C1
            dY[:, 2, 2] = C1
            dY[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        Y[:, 4] = C2[0] * xy
        Y[:, 5] = C2[1] * yz
        Y[:, 6] = C2[2] * (2 * zz - xx - yy)
        Y[:, 7] = C2[3] * xz
        Y[:, 8] = C2[4] * (xx - yy)
        if with_grad:
            dY[:, 4] = C2[0] * np.stack([y, x, 0 * x], -1)
            dY[:, 5] = C2[1] * np.stack([0 * x, z, y], -1)
            dY[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
            dY[:, 7] = C2[3] * np.stack([z, 0 * x, x], -1)
            dY[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        Y[:, 9] = C3[0] * y * (3 * xx - yy)
        Y[:, 10] = C3[1] * xy * z
        Y[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        Y[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        Y[:, 14] = C3[5] * z * (xx - yy)
        Y[:, 15] = C3[6] * x * (xx - 3 * yy)
        if with_grad:
            zero = 0 * x
            dY[:, 9] = C3[0] * np.stack([6 * xy, 3 * xx - 3 * yy, zero], -1)
            dY[:, 10] = C3[1] * np.stack([yz, xz, xy], -1)
            dY[:, 11] = C3[2] * np.stack([-2 * xy, 4 * zz - xx - 3 * yy, 8 * yz], -1)
            dY[:, 12] = C3[3] * np.stack([-6 * xz, -6 * yz, 6 * zz - 3 * xx - 3 * yy], -1)
            dY[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * xy, 8 * xz], -1)
            dY[:, 14] = C3[5] * np.stack([2 * xz, -2 * yz, xx - yy], -1)
            dY[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * xy, zero], -1)
    return (Y, dY) if with_grad else Y


def eval_sh(sh_coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """RGB from SH coefficients: sum_b c_b Y_b(dir) + 0.5, clamped below at 0.

    `sh_coeffs` is (N, 3, B) or a single (3, B) block; only the first
    (degree + 1)^2 coefficients are used.
    """
    rgb, _ = eval_sh_with_cache(sh_coeffs, dirs, degree)
    return rgb


def eval_sh_with_cache(sh_coeffs, dirs, degree):
    single = np.ndim(sh_coeffs) == 2
    sh = np.asarray(sh_coeffs)[None] if single else np.asarray(sh_coeffs)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if degree > degree_from_basis(sh.shape[-1]) or degree < 0:
        raise DegreeOutOfRange(
            f"degree {degree} exceeds stored coefficients ({sh.shape[-1]})")
    B = num_basis(degree)
    Y = sh_basis(d, degree)
    raw = np.einsum("ncb,nb->nc", sh[:, :, :B].astype(np.float64), Y) + 0.5
    rgb = np.maximum(raw, 0.0)
    cache = (sh, d, degree, Y, raw > 0)
    return (rgb[0] if single else rgb), cache


def eval_sh_backward(cache, d_rgb: np.ndarray):
    """Gradients of eval_sh w.r.t. coefficients (full B, zero beyond degree) and dirs."""
    sh, d, degree, Y, active = cache
    g = np.asarray(d_rgb, dtype=np.float64).reshape(-1, 3) * active
    B = num_basis(degree)
    d_sh = np.zeros(sh.shape, dtype=np.float64)
    d_sh[:, :, :B] = g[:, :, None] * Y[:, None, :]
    _, dY = sh_basis(d, degree, with_grad=True)
    # d_dir = sum_c sum_b g_c sh_cb dY_b
    w = np.einsum("nc,ncb->nb", g, sh[:, :, :B].astype(np.float64))
    d_dirs = np.einsum("nb,nbk->nk", w, dY)
    return d_sh, d_dirs

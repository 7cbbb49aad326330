"""Training objectives and their analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatch
from .medium import BETA_EPS, MediumParams

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lam: float = 0.8        # L1 share of the reconstruction loss
    lambda_d: float = 0.05
    lambda_ca: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.lambda_d < 0 or self.lambda_ca < 0:
            raise ValueError("depth weights must be non-negative")


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{np.shape(a)} vs {np.shape(b)}")


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(x, win):
    # zero padding; the window is symmetric, so this operator is self-adjoint
    y = correlate1d(x, win, axis=0, mode="constant")
    return correlate1d(y, win, axis=1, mode="constant")


def ssim_map(x, y, win=None, with_grad=False):
    """Per-pixel, per-channel SSIM of x against y (H, W, C) plus optional dS/dx pieces."""
    win = gaussian_window() if win is None else win
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    if not with_grad:
        return S
    return S, (x, y, mx, my, A1, A2, B1, B2, win)


def _ssim_backward(cache, d_S):
    """Gradient of sum(d_S * S) w.r.t. x."""
    x, y, mx, my, A1, A2, B1, B2, win = cache
    S = (A1 * A2) / (B1 * B2)
    # S depends on x through mx, E[x^2] and E[xy]
    dS_dmx = (2 * my * A2) / (B1 * B2) - S * (2 * mx) / B1 \
        + (-2 * my * A1) / (B1 * B2) - S * (-2 * mx) / B2
    dS_dExx = -S / B2
    dS_dExy = 2 * A1 / (B1 * B2)
    return (_blur(d_S * dS_dmx, win) + 2 * x * _blur(d_S * dS_dExx, win)
            + y * _blur(d_S * dS_dExy, win))


def ssim(x, y) -> float:
    return float(np.mean(ssim_map(x, y)))


def rec_loss(render, target, omega=None, lam=0.8):
    """Masked L1 / D-SSIM mix. Returns (loss, dL/drender).

    D-SSIM is (1 - SSIM) / 2 per pixel and channel; masked-out pixels
    contribute nothing to either term, but every pixel counts in the mean.
    """
    _check_same(render, target)
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    H, W, C = x.shape
    m = np.ones((H, W)) if omega is None else np.asarray(omega, dtype=np.float64)
    if m.shape != (H, W):
        raise ShapeMismatch(f"mask {m.shape} vs image {(H, W)}")
    m3 = m[..., None]
    n = x.size
    diff = x - y
    l1 = np.sum(m3 * np.abs(diff)) / n
    S, cache = ssim_map(x, y, with_grad=True)
    dssim = np.sum(m3 * (1.0 - S) / 2.0) / n
    loss = lam * l1 + (1 - lam) * dssim
    grad = lam * m3 * np.sign(diff) / n
    grad = grad + (1 - lam) * _ssim_backward(cache, np.broadcast_to(-m3 / (2.0 * n), S.shape))
    return float(loss), grad


def minmax_normalize(d):
    d = np.asarray(d, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def depth_loss(rendered, target):
    """Mean |norm(rendered) - norm(target)| with per-image min-max normalization.

    Returns (loss, dL/drendered); the gradient flows through the rendered
    map's normalization (min and max pixels included).
    """
    _check_same(rendered, target)
    d = np.asarray(rendered, dtype=np.float64)
    t = minmax_normalize(target)
    lo_i, hi_i = np.argmin(d), np.argmax(d)
    lo, hi = d.flat[lo_i], d.flat[hi_i]
    rng_ = hi - lo
    if rng_ <= 0:
        return float(np.mean(np.abs(t))), np.zeros_like(d)
    dn = (d - lo) / rng_
    s = np.sign(dn - t) / d.size
    grad = s / rng_
    # dn_k = (d_k - lo) / (hi - lo)
    g_lo = np.sum(s * (dn - 1.0)) / rng_
    g_hi = np.sum(-s * dn) / rng_
    grad.flat[lo_i] += g_lo
    grad.flat[hi_i] += g_hi
    return float(np.mean(np.abs(dn - t))), grad


def ca_loss(params: MediumParams, z, eps=BETA_EPS):
    """Channel-wise depth alignment: mean over Gaussians of sum |(-ln T)/beta - z|.

    Six terms per Gaussian (r, g, b) x (direct, backscatter). `z` is treated
    as a measurement (no gradient). Returns (loss, MediumParams of grads).
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    n = z.shape[0]
    grads = MediumParams.zeros_like(params)
    total = 0.0
    out = {}
    for T, beta, tname, bname in ((params.T_D, params.beta_d, "T_D", "beta_d"),
                                  (params.T_B, params.beta_b, "T_B", "beta_b")):
        T = np.clip(np.asarray(T, dtype=np.float64), 1e-12, 1.0)
        beta = np.asarray(beta, dtype=np.float64)
        bc = np.maximum(beta, eps)
        zhat = -np.log(T) / bc
        r = zhat - z
        total += np.sum(np.abs(r))
        s = np.sign(r) / n
        out[tname] = s * (-1.0 / (T * bc))
        out[bname] = np.where(beta > eps, s * np.log(T) / bc**2, 0.0)
    grads = MediumParams(out["T_D"], out["T_B"], out["beta_d"], out["beta_b"],
                         np.zeros_like(np.asarray(params.b, dtype=np.float64)))
    return float(total / n), grads


def gray_world_loss(J):
    """sum over channels of (mean(J_c) - 0.5)^2. Returns (loss, dL/dJ)."""
    J = np.asarray(J, dtype=np.float64)
    mu = J.reshape(-1, J.shape[-1]).mean(axis=0)
    loss = float(np.sum((mu - 0.5) ** 2))
    npx = J.size // J.shape[-1]
    grad = np.broadcast_to(2 * (mu - 0.5) / npx, J.shape).copy()
    return loss, grad


@dataclass
class LossTerms:
    rec: float = 0.0
    depth: float = 0.0
    ca: float = 0.0
    gray: float = 0.0


def total_loss(terms: LossTerms, weights: LossWeights, phase: str):
    """Combine components; returns (total, per-term multipliers for gradient routing).

    Warm-up uses only the depth-related terms.
    """
    if phase not in ("warmup", "main"):
        raise ValueError(f"unknown phase {phase!r}")
    scale = {"rec": 0.0, "depth": weights.lambda_d, "ca": weights.lambda_ca, "gray": 0.0}
    if phase == "main":
        scale["rec"] = 1.0
        scale["gray"] = 1.0
    total = sum(scale[k] * getattr(terms, k) for k in scale)
    return float(total), scale

"""Binary motion mask: per-pixel inlier detection from render residuals.

Three views of the same residual are OR-ed together: a trimmed threshold
on the residual itself, a 3x3 smoothed version of that, and an 8x8 patch
vote over a 16x16 neighbourhood. A pixel is an inlier if any of them says so.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

PATCH = 8
NEIGHBOURHOOD = 16


@dataclass
class BMMConfig:
    trim_quantile: float = 0.8
    t_star: float = 0.5
    t_r: float = 0.6
    components: str = "123"  # which masks enter the union

    def __post_init__(self):
        if not 0 < self.trim_quantile <= 1:
            raise ValueError("trim_quantile must be in (0, 1]")
        if not set(self.components) <= set("123") or "1" not in self.components:
            raise ValueError("components must include '1' and only use '1', '2', '3'")


@dataclass
class MotionMask:
    omega1: np.ndarray
    omega2: np.ndarray
    omega3: np.ndarray
    omega: np.ndarray
    residual: np.ndarray
    T_eps: float
    T_star: float
    T_R: float
    trim_quantile: float

    @property
    def inlier_fraction(self) -> float:
        return float(self.omega.mean())


def residual(rendered, target):
    """Per-pixel L2 norm of the RGB difference."""
    if np.shape(rendered) != np.shape(target):
        raise ShapeMismatch(f"{np.shape(rendered)} vs {np.shape(target)}")
    d = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def trimmed_threshold(res, quantile):
    """Smallest residual r such that at least `quantile` of pixels are <= r."""
    return float(np.quantile(res, quantile, method="inverted_cdf"))


def mask1(res, T_eps, quantile=0.8):
    """Returns (omega1, threshold for the next iteration)."""
    res = np.asarray(res)
    return res <= T_eps, trimmed_threshold(res, quantile)


def mask2(omega1, t_star=0.5):
    """3x3 box diffusion with replicated borders, thresholded at t_star."""
    o = np.asarray(omega1, dtype=np.int64)
    p = np.pad(o, 1, mode="edge")
    H, W = o.shape
    count = sum(p[dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3))
    # compare counts, not floats, so a full 3x3 block is exactly 1.0
    return count >= t_star * 9 - 1e-9


def mask3(omega2, t_r=0.6):
    """Classify each 8x8 patch by the mean of omega2 over its centred 16x16 window."""
    o = np.asarray(omega2, dtype=np.float64)
    H, W = o.shape
    Hp = -(-H // PATCH) * PATCH
    Wp = -(-W // PATCH) * PATCH
    p = np.pad(o, ((0, Hp - H), (0, Wp - W)), mode="edge")
    ii = np.zeros((Hp + 1, Wp + 1))
    ii[1:, 1:] = p.cumsum(0).cumsum(1)
    half = (NEIGHBOURHOOD - PATCH) // 2
    out = np.zeros((Hp, Wp), dtype=bool)
    for y0 in range(0, Hp, PATCH):
        ya, yb = max(0, y0 - half), min(Hp, y0 + PATCH + half)
        for x0 in range(0, Wp, PATCH):
            xa, xb = max(0, x0 - half), min(Wp, x0 + PATCH + half)
            s = ii[yb, xb] - ii[ya, xb] - ii[yb, xa] + ii[ya, xa]
            mean = s / ((yb - ya) * (xb - xa))
            out[y0:y0 + PATCH, x0:x0 + PATCH] = mean >= t_r - 1e-12
    return out[:H, :W]


def combine(omega1, omega2, omega3):
    if not (np.shape(omega1) == np.shape(omega2) == np.shape(omega3)):
        raise ShapeMismatch("masks differ in shape")
    return np.asarray(omega1, bool) | np.asarray(omega2, bool) | np.asarray(omega3, bool)


def motion_mask(rendered, target, T_eps, cfg: BMMConfig = BMMConfig()):
    """Full mask for one view. Returns (MotionMask, T_eps for the next call)."""
    res = residual(rendered, target)
    o1, next_T = mask1(res, T_eps, cfg.trim_quantile)
    o2 = mask2(o1, cfg.t_star)
    o3 = mask3(o2, cfg.t_r)
    parts = {"1": o1, "2": o2, "3": o3}
    omega = np.zeros_like(o1)
    for c in cfg.components:
        omega |= parts[c]
    mm = MotionMask(o1, o2, o3, omega, res, float(T_eps), cfg.t_star, cfg.t_r,
                    cfg.trim_quantile)
    return mm, next_T


def mask_from_threshold(res, T_eps, cfg: BMMConfig):
    o1 = np.asarray(res) <= T_eps
    o2 = mask2(o1, cfg.t_star)
    o3 = mask3(o2, cfg.t_r)
    return combine(o1, o2 if "2" in cfg.components else np.zeros_like(o1),
                   o3 if "3" in cfg.components else np.zeros_like(o1))


def mask_scores(omega, distractor):
    """(fraction of distractor pixels flagged as outliers, fraction of static pixels flagged)."""
    omega = np.asarray(omega, bool)
    distractor = np.asarray(distractor, bool)
    cover = float((~omega & distractor).sum() / max(1, distractor.sum()))
    false = float((~omega & ~distractor).sum() / max(1, (~distractor).sum()))
    return cover, false


def calibrate(residuals, distractor_masks, quantiles=(0.8, 0.85, 0.9, 0.95),
              t_stars=(0.3, 0.4, 0.5, 0.6, 0.7), t_rs=(0.5, 0.6, 0.7, 0.8, 0.9, 1.0)):
    """Grid-search thresholds against ground-truth distractor masks.

    The threshold for each residual map is the trimmed quantile of that map,
    as it would be at steady state during training. Returns
    (best BMMConfig, coverage, false-flag rate), maximizing coverage minus
    false flags.
    """
    best = None
    for q, ts, tr in itertools.product(quantiles, t_stars, t_rs):
        cfg = BMMConfig(q, ts, tr)
        omegas = [mask_from_threshold(res, trimmed_threshold(res, q), cfg) for res in residuals]
        c, f = mask_scores(np.concatenate([o.ravel() for o in omegas]),
                           np.concatenate([np.ravel(g) for g in distractor_masks]))
        if best is None or c - f > best[1] - best[2]:
            best = (cfg, c, f)
    return best

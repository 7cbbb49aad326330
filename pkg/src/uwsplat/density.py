"""Densification and pruning driven by attenuation-compensated screen gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import quat_to_rotmat
from .errors import CloudEmptyAfterPrune
from .gaussians import GaussianCloud, sigmoid


@dataclass
class DensityControlConfig:
    tau: float = 2e-4
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 7500
    prune_opacity: float = 0.005
    max_screen_radius_px: float = 20.0
    comp_clamp_max: float = 20.0
    z_damp_ref: float | None = None  # None: 10% of the scene radius
    clone_scale_frac: float = 0.01
    split_count: int = 2
    split_divisor: float = 1.6
    opacity_reset_interval: int = 3000
    enable_physics_comp: bool = True
    enable_pixel_weighting: bool = True
    enable_z_damp: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.densify_start > self.densify_end or self.densify_interval <= 0:
            raise ValueError("densification schedule is not ordered")
        if self.comp_clamp_max < 1:
            raise ValueError("comp_clamp_max must be >= 1")

    def is_event(self, iteration: int) -> bool:
        return (self.densify_start <= iteration <= self.densify_end
                and iteration % self.densify_interval == 0)


def compensate_gradient(grad_norm, T_D_mean, z, cfg: DensityControlConfig, z_damp_ref=None):
    """grad * min(1/T_D, clamp) * min(1, z / z_ref), each factor switchable."""
    g = np.asarray(grad_norm, dtype=np.float64)
    if cfg.enable_physics_comp:
        inv = 1.0 / np.maximum(np.asarray(T_D_mean, dtype=np.float64), 1e-12)
        g = g * np.minimum(inv, cfg.comp_clamp_max)
    if cfg.enable_z_damp:
        ref = cfg.z_damp_ref if z_damp_ref is None else z_damp_ref
        if ref is not None and ref > 0:
            g = g * np.minimum(1.0, np.asarray(z, dtype=np.float64) / ref)
    return g


def accumulate(cloud: GaussianCloud, comp_grad, covered, visible, cfg: DensityControlConfig):
    """Add one view's statistics to the cloud's accumulators in place."""
    covered = np.asarray(covered, dtype=np.float64)
    comp_grad = np.asarray(comp_grad, dtype=np.float64)
    if cfg.enable_pixel_weighting:
        cloud.grad_accum += (comp_grad * covered).astype(cloud.dtype)
        cloud.coverage_accum += covered.astype(cloud.dtype)
    else:
        vis = np.asarray(visible, bool)
        cloud.grad_accum[vis] += comp_grad[vis].astype(cloud.dtype)
        cloud.view_accum[vis] += 1
        cloud.coverage_accum += covered.astype(cloud.dtype)


def average_gradients(cloud: GaussianCloud, cfg: DensityControlConfig):
    denom = cloud.coverage_accum if cfg.enable_pixel_weighting else cloud.view_accum
    denom = denom.astype(np.float64)
    out = np.zeros(len(cloud))
    ok = denom > 0
    out[ok] = cloud.grad_accum[ok] / denom[ok]
    return out


def densify_and_prune(cloud: GaussianCloud, cfg: DensityControlConfig, scene_radius: float,
                      rng: np.random.Generator, prune_screen: bool = True):
    """Clone small / split large high-gradient Gaussians, then prune.

    `prune_screen` gates the screen-radius rule (the trainer only enables it
    after the first opacity reset, as reference 3DGS does).

    Returns (new cloud, origin, stats). `origin[i]` is the index in the old
    cloud that Gaussian i survives from, or -1 for newly created ones (whose
    optimizer state starts fresh).
    """
    avg = average_gradients(cloud, cfg)
    n = len(cloud)
    hot = avg >= cfg.tau
    max_scale = cloud.scales.max(axis=1)
    small = max_scale <= cfg.clone_scale_frac * scene_radius
    clone = hot & small
    split = hot & ~small

    clones = cloud.subset(clone)
    k = cfg.split_count
    parents = cloud.subset(np.repeat(np.flatnonzero(split), k))
    if len(parents):
        R = quat_to_rotmat(parents.rotations / np.linalg.norm(parents.rotations, axis=1, keepdims=True))
        local = rng.normal(size=(len(parents), 3)) * parents.scales
        parents.positions = (parents.positions + np.einsum("nij,nj->ni", R, local)).astype(cloud.dtype)
        parents.log_scales = (parents.log_scales - np.log(cfg.split_divisor)).astype(cloud.dtype)
    survivors = np.flatnonzero(~split)
    grown = cloud.subset(survivors).extend(clones).extend(parents)
    origin = np.concatenate([survivors, -np.ones(len(clones) + len(parents), dtype=np.int64)])

    prune = sigmoid(grown.logit_opacities.astype(np.float64)) < cfg.prune_opacity
    if prune_screen and cfg.max_screen_radius_px:
        prune |= grown.max_screen_radius > cfg.max_screen_radius_px
    keep = ~prune
    if not keep.any():
        raise CloudEmptyAfterPrune("every Gaussian was pruned")
    out = grown.subset(keep)
    out.reset_accumulators()
    stats = {"cloned": int(clone.sum()), "split": int(split.sum()),
             "pruned": int(prune.sum()), "size_before": n, "size_after": len(out)}
    return out, origin[keep], stats


def reset_opacity(cloud: GaussianCloud, ceiling=0.01):
    """Clamp opacities down to `ceiling` (periodic reset)."""
    cap = np.log(ceiling / (1 - ceiling))
    cloud.logit_opacities = np.minimum(cloud.logit_opacities, cap).astype(cloud.dtype)

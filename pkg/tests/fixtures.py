"""Shared scene fixtures for the test-suite and the acceptance run."""
from __future__ import annotations

import numpy as np

from uwsplat.density import DensityControlConfig, accumulate, average_gradients, compensate_gradient
from uwsplat.gaussians import GaussianCloud
from uwsplat.losses import rec_loss
from uwsplat.medium import MediumParams, transform_color
from uwsplat.raster import Splats, coverage_stats, render, render_backward


def attenuation_pair(factors=(1.0, 0.4), n_views=3, size=48, compensate=True, seed=0):
    """Two identical, well separated splats seen through different attenuation.

    Each view shifts the target positions a little; the loss is pure L1 so a
    splat's screen gradient scales linearly with its T_D. Returns the
    pixel-weighted average gradient per splat after accumulating all views.
    """
    rng = np.random.default_rng(seed)
    cfg = DensityControlConfig(enable_physics_comp=compensate, enable_z_damp=False)
    cloud = GaussianCloud.from_points(np.zeros((2, 3)), np.full((2, 3), 0.5), 0)
    base = np.array([[size * 0.27, size * 0.5], [size * 0.73, size * 0.5]])
    cov = np.tile([9.0, 0.0, 9.0], (2, 1))
    color = np.array([[0.9, 0.7, 0.5]] * 2)
    TD = np.repeat(np.asarray(factors, dtype=np.float64)[:, None], 3, axis=1)
    med = MediumParams(TD, np.ones((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    cm = transform_color(color, med)
    op = np.full(2, 0.8)
    z = np.full(2, 5.0)
    for _ in range(n_views):
        shift = rng.uniform(-1.5, 1.5, 2)
        jitter = rng.uniform(-2, 2, 2)
        mean = base + jitter
        sp = Splats(mean, cov, cm, op, z, np.full(2, 9.0), np.ones(2, bool))
        tgt = Splats(mean + shift, cov, cm, op, z, np.full(2, 9.0), np.ones(2, bool))
        out = render(sp, size, size)
        target = render(tgt, size, size).image
        _, g_img = rec_loss(out.image, target, lam=1.0)
        g = render_backward(out, g_img)
        covered, gn = coverage_stats(out, g)
        comp = compensate_gradient(gn, TD.mean(axis=1), z, cfg)
        accumulate(cloud, comp, covered, sp.visible, cfg)
    return average_gradients(cloud, cfg)

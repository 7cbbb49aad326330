"""One view through the whole model: SH color, medium transform, projection, blending.

:func:`forward_view` keeps every intermediate that :func:`backward_view`
needs to chain pixel gradients back to Gaussian and medium-net parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .gaussians import (GaussianCloud, Projection, depth_and_dir, depth_and_dir_backward,
                        project, project_backward, sigmoid)
from .medium import (MediumNet, MediumParams, medium_backward, medium_forward,
                     transform_color, transform_color_backward)
from .raster import RasterGrads, RenderOutput, Splats, render, render_backward
from .sh import eval_sh_backward, eval_sh_with_cache


@dataclass
class ViewContext:
    camera: Camera
    z: np.ndarray
    theta: np.ndarray
    color: np.ndarray            # SH color before the medium
    medium: MediumParams | None
    proj: Projection
    out: RenderOutput
    clean: RenderOutput | None
    sh_cache: tuple
    medium_cache: object
    opacity: np.ndarray


@dataclass
class ViewGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    net: dict | None
    raster: RasterGrads


def forward_view(cloud: GaussianCloud, net: MediumNet | None, camera: Camera,
                 scene_radius: float, sh_degree: int, background=None,
                 render_clean=False, medium_override: MediumParams | None = None) -> ViewContext:
    """Render one camera.

    With `net=None` the Gaussian colors are used as-is (SH-only model).
    `background=None` composites over the mean learned backscatter color
    (black without a medium). `medium_override` replaces the net output, e.g.
    with :meth:`MediumParams.identity`.
    """
    pos = cloud.positions.astype(np.float64)
    z, theta = depth_and_dir(pos, camera)
    color, sh_cache = eval_sh_with_cache(cloud.sh_coeffs, theta, sh_degree)
    proj = project(pos, cloud.rotations, cloud.log_scales, camera)
    medium, mcache = None, None
    if medium_override is not None:
        medium = medium_override
    elif net is not None:
        medium, mcache = medium_forward(net, z, theta, scene_radius)
    if medium is not None:
        cm = transform_color(color, medium)
        if background is None:
            vis = proj.visible
            background = (np.asarray(medium.b, dtype=np.float64)[vis].mean(axis=0)
                          if vis.any() else np.zeros(3))
    else:
        cm = color
    if background is None:
        background = np.zeros(3)
    opacity = sigmoid(cloud.logit_opacities.astype(np.float64))
    splats = Splats(proj.mean2d, proj.cov2d, cm, opacity, z, proj.radius, proj.visible)
    out = render(splats, camera.width, camera.height, background)
    clean = None
    if render_clean:
        clean = render(Splats(proj.mean2d, proj.cov2d, color, opacity, z, proj.radius,
                              proj.visible), camera.width, camera.height, np.zeros(3))
    return ViewContext(camera, z, theta, color, medium, proj, out, clean, sh_cache, mcache,
                       opacity)


def backward_view(ctx: ViewContext, cloud: GaussianCloud, net: MediumNet | None,
                  d_image, d_depth=None, d_clean=None,
                  d_medium: MediumParams | None = None) -> ViewGrads:
    """Chain pixel-space gradients back to every parameter.

    `d_clean` (gradient on the clean render) reaches the SH coefficients
    only. `d_medium` adds direct gradients on the medium parameters (from
    the depth-alignment loss).
    """
    g = render_backward(ctx.out, d_image, d_depth)
    d_z = g.d_depth.copy()
    d_theta = np.zeros_like(ctx.theta)
    net_grads = None
    if ctx.medium is not None:
        d_c, d_med = transform_color_backward(ctx.color, ctx.medium, g.d_color)
        if d_medium is not None:
            d_med = d_med + d_medium
        if ctx.medium_cache is not None:
            net_grads, dz_m, dth_m = medium_backward(net, ctx.medium_cache, d_med)
            d_z += dz_m
            d_theta += dth_m
    else:
        d_c = g.d_color
    if d_clean is not None and ctx.clean is not None:
        d_c = d_c + render_backward(ctx.clean, d_clean).d_color
    d_sh, d_dir = eval_sh_backward(ctx.sh_cache, d_c)
    d_theta += d_dir
    d_pos = depth_and_dir_backward(ctx.z, ctx.theta, d_z, d_theta)
    d_pos_p, d_rot, d_ls = project_backward(ctx.proj, cloud.positions, cloud.rotations,
                                            cloud.log_scales, g.d_mean2d, g.d_cov2d)
    d_logit = g.d_opacity * ctx.opacity * (1.0 - ctx.opacity)
    return ViewGrads(d_pos + d_pos_p, d_rot, d_ls, d_logit, d_sh, net_grads, g)

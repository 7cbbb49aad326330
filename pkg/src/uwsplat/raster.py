"""Tile-based alpha blending of screen-space Gaussians, forward and backward.

Splats are binned into 16x16 tiles, sorted by (tile, depth), and blended
front to back per pixel. Per-entry outputs (one entry per tile/Gaussian
pair) are written only by the tile that owns them and reduced afterwards
with bincount, so results do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

# TBB in this image is too old for numba; workqueue is always available
numba.config.THREADING_LAYER = "workqueue"

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
COVER_EPS = 1e-4
# alpha is zero beyond 3 sigma (Mahalanobis), matching the culling footprint
POWER_CUTOFF = -4.5


@dataclass
class Splats:
    """Screen-space inputs to the rasterizer."""

    mean2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray    # (N, 3) packed a, b, c
    color: np.ndarray    # (N, 3)
    opacity: np.ndarray  # (N,)
    depth: np.ndarray    # (N,) distance used for sorting and depth blending
    radius: np.ndarray   # (N,)
    visible: np.ndarray  # (N,) bool


@dataclass
class RenderOutput:
    image: np.ndarray           # (H, W, 3)
    depth: np.ndarray           # (H, W)
    final_T: np.ndarray         # (H, W)
    n_contrib: np.ndarray       # (H, W) entries walked up to the last contributor
    covered_pixels: np.ndarray  # (N,)
    accum_blend_weight: np.ndarray  # (N,)
    point_list: np.ndarray = field(repr=False)
    tile_ranges: np.ndarray = field(repr=False)
    splats: Splats = field(repr=False)
    conic: np.ndarray = field(repr=False)
    background: np.ndarray = field(repr=False)
    tile: int = TILE


@dataclass
class RasterGrads:
    d_mean2d: np.ndarray   # (N, 2)
    d_cov2d: np.ndarray    # (N, 3) packed, b shared off-diagonal
    d_color: np.ndarray    # (N, 3)
    d_opacity: np.ndarray  # (N,)
    d_depth: np.ndarray    # (N,)


def set_threads(n: int):
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _conic(cov2d):
    a, b, c = np.asarray(cov2d, dtype=np.float64).T
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], -1)


def bin_splats(mean2d, radius, visible, depth, width, height, tile=TILE):
    """Duplicate each visible splat into every tile its 3-sigma box touches.

    Returns (point_list, tile_ranges): Gaussian ids sorted by (tile, depth,
    id) and the [start, end) slice of point_list for every tile.
    """
    tw = (width + tile - 1) // tile
    th = (height + tile - 1) // tile
    idx = np.flatnonzero(visible)
    mx, my, r = mean2d[idx, 0], mean2d[idx, 1], radius[idx]
    x0 = np.clip(np.floor((mx - r) / tile), 0, tw - 1).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / tile), 0, tw - 1).astype(np.int64) + 1
    y0 = np.clip(np.floor((my - r) / tile), 0, th - 1).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / tile), 0, th - 1).astype(np.int64) + 1
    nx, ny = x1 - x0, y1 - y0
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[owner] + offset % nx[owner]
    ty = y0[owner] + offset // nx[owner]
    tile_id = ty * tw + tx
    gid = idx[owner]
    order = np.lexsort((gid, depth[gid], tile_id))
    point_list = gid[order]
    sorted_tiles = tile_id[order]
    n_tiles = tw * th
    starts = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="right")
    return point_list.astype(np.int64), np.stack([starts, ends], -1).astype(np.int64)


@njit(parallel=True, cache=True)
def _forward_kernel(point_list, ranges, mean2d, conic, opacity, color, depth, bg,
                    width, height, tile):
    tw = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    image = np.zeros((height, width, 3))
    dmap = np.zeros((height, width))
    final_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    entry_w = np.zeros(point_list.shape[0])
    entry_cov = np.zeros(point_list.shape[0], dtype=np.int64)
    for t in prange(n_tiles):
        start, end = ranges[t, 0], ranges[t, 1]
        ty0 = (t // tw) * tile
        tx0 = (t % tw) * tile
        for py in range(ty0, min(ty0 + tile, height)):
            for px in range(tx0, min(tx0 + tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dd = 0.0
                last = 0
                for j in range(start, end):
                    g = point_list[j]
                    dx = mean2d[g, 0] - fx
                    dy = mean2d[g, 1] - fy
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power < -4.5:
                        continue
                    alpha = min(0.99, opacity[g] * np.exp(power))
                    test_T = T * (1.0 - alpha)
                    if test_T < 1e-4:
                        break
                    w = alpha * T
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    dd += w * depth[g]
                    entry_w[j] += w
                    if w > 1e-4:
                        entry_cov[j] += 1
                    T = test_T
                    last = j - start + 1
                image[py, px, 0] = c0 + T * bg[0]
                image[py, px, 1] = c1 + T * bg[1]
                image[py, px, 2] = c2 + T * bg[2]
                dmap[py, px] = dd
                final_T[py, px] = T
                n_contrib[py, px] = last
    return image, dmap, final_T, n_contrib, entry_w, entry_cov


@njit(parallel=True, cache=True)
def _backward_kernel(point_list, ranges, mean2d, conic, opacity, color, depth, bg,
                     final_T, n_contrib, d_img, d_depth, width, height, tile):
    tw = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    # per entry: mean x, y, conic a, b, c, color rgb, opacity, depth
    eg = np.zeros((point_list.shape[0], 10))
    for t in prange(n_tiles):
        start = ranges[t, 0]
        ty0 = (t // tw) * tile
        tx0 = (t % tw) * tile
        for py in range(ty0, min(ty0 + tile, height)):
            for px in range(tx0, min(tx0 + tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                T_final = final_T[py, px]
                T = T_final
                g0 = d_img[py, px, 0]
                g1 = d_img[py, px, 1]
                g2 = d_img[py, px, 2]
                gd = d_depth[py, px]
                bg_dot = bg[0] * g0 + bg[1] * g1 + bg[2] * g2
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                accd = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                ld = 0.0
                for j in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = point_list[j]
                    dx = mean2d[g, 0] - fx
                    dy = mean2d[g, 1] - fy
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power < -4.5:
                        continue
                    G = np.exp(power)
                    raw = opacity[g] * G
                    alpha = min(0.99, raw)
                    T = T / (1.0 - alpha)
                    wgt = alpha * T
                    eg[j, 5] += wgt * g0
                    eg[j, 6] += wgt * g1
                    eg[j, 7] += wgt * g2
                    eg[j, 9] += wgt * gd
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    accd = last_alpha * ld + (1.0 - last_alpha) * accd
                    lc0 = color[g, 0]
                    lc1 = color[g, 1]
                    lc2 = color[g, 2]
                    ld = depth[g]
                    d_alpha = ((lc0 - acc0) * g0 + (lc1 - acc1) * g1 + (lc2 - acc2) * g2
                               + (ld - accd) * gd) * T
                    d_alpha += -T_final / (1.0 - alpha) * bg_dot
                    last_alpha = alpha
                    if raw >= 0.99:
                        continue
                    eg[j, 8] += G * d_alpha
                    d_power = opacity[g] * G * d_alpha
                    eg[j, 0] += d_power * (-conic[g, 0] * dx - conic[g, 1] * dy)
                    eg[j, 1] += d_power * (-conic[g, 2] * dy - conic[g, 1] * dx)
                    eg[j, 2] += d_power * (-0.5 * dx * dx)
                    eg[j, 3] += d_power * (-dx * dy)
                    eg[j, 4] += d_power * (-0.5 * dy * dy)
    return eg


def render(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
           tile=TILE) -> RenderOutput:
    """Blend splats front to back into an RGB image and a depth map.

    Alpha is opacity * exp(-d^T cov^-1 d / 2) clamped to 0.99, zero outside
    the 3-sigma ellipse; a pixel stops accumulating once its transmittance
    would fall below 1e-4. Residual transmittance composites over
    `background`. Depth uses the same weights and no background term.
    """
    n = len(splats.opacity)
    mean2d = np.ascontiguousarray(splats.mean2d, dtype=np.float64)
    conic = np.zeros((n, 3))
    vis = np.asarray(splats.visible, dtype=bool)
    conic[vis] = _conic(np.asarray(splats.cov2d)[vis])
    depth = np.ascontiguousarray(splats.depth, dtype=np.float64)
    point_list, ranges = bin_splats(mean2d, np.asarray(splats.radius, dtype=np.float64),
                                    vis, depth, width, height, tile)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    image, dmap, final_T, n_contrib, entry_w, entry_cov = _forward_kernel(
        point_list, ranges, mean2d, conic,
        np.ascontiguousarray(splats.opacity, dtype=np.float64),
        np.ascontiguousarray(splats.color, dtype=np.float64),
        depth, bg, width, height, tile,
    )
    covered = np.bincount(point_list, weights=entry_cov, minlength=n).astype(np.int64)
    blend = np.bincount(point_list, weights=entry_w, minlength=n)
    return RenderOutput(image, dmap, final_T, n_contrib, covered, blend,
                        point_list, ranges, splats, conic, bg, tile)


def render_backward(out: RenderOutput, d_image, d_depth=None) -> RasterGrads:
    """Exact gradients of the blend w.r.t. each splat's screen-space inputs."""
    sp = out.splats
    n = len(sp.opacity)
    H, W = out.depth.shape
    d_image = np.ascontiguousarray(d_image, dtype=np.float64).reshape(H, W, 3)
    if d_depth is None:
        d_depth = np.zeros((H, W))
    d_depth = np.ascontiguousarray(d_depth, dtype=np.float64).reshape(H, W)
    eg = _backward_kernel(
        out.point_list, out.tile_ranges, np.ascontiguousarray(sp.mean2d, dtype=np.float64),
        out.conic, np.ascontiguousarray(sp.opacity, dtype=np.float64),
        np.ascontiguousarray(sp.color, dtype=np.float64),
        np.ascontiguousarray(sp.depth, dtype=np.float64), out.background,
        out.final_T, out.n_contrib, d_image, d_depth, W, H, out.tile,
    )
    per = np.stack([np.bincount(out.point_list, weights=eg[:, k], minlength=n)
                    for k in range(10)], -1) if len(out.point_list) else np.zeros((n, 10))
    d_conic = per[:, 2:5]
    # d cov = -Q dQ Q with the conic Q symmetric; b enters both off-diagonals
    A, B, C = out.conic.T
    Q = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], 1)
    dQ = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], 1)
    dS = -Q @ dQ @ Q
    d_cov = np.stack([dS[:, 0, 0], dS[:, 0, 1] + dS[:, 1, 0], dS[:, 1, 1]], -1)
    return RasterGrads(per[:, 0:2], d_cov, per[:, 5:8], per[:, 8], per[:, 9])


def coverage_stats(out: RenderOutput, grads: RasterGrads):
    """Per-Gaussian (covered pixel count, screen-space position gradient norm)."""
    gn = np.linalg.norm(grads.d_mean2d, axis=1)
    gn = np.where(out.splats.visible, gn, 0.0)
    return out.covered_pixels.copy(), gn

"""Synthetic underwater scenes with known geometry and medium.

Clean images come from the package's own rasterizer (opaque Gaussians on a
tilted, bumpy seabed); the underwater targets apply the formation model per
pixel with the exact rendered distance:

    I = J * exp(-beta_d z) + b * (1 - exp(-beta_b z))
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.optimize import least_squares

from .camera import Camera, look_at
from .errors import InsufficientDepthVariation
from .gaussians import project
from .raster import Splats, render
from .scene_io import SceneBundle, View, minmax_or_zero, write_colmap


@dataclass
class DistractorSpec:
    size_frac: float = 0.05                 # square area / image area
    color: tuple = (1.0, 0.1, 0.8)
    view_fraction: float = 0.6              # share of training views that contain it
    start: tuple = (0.1, 0.15)              # top-left corner, fraction of (W, H)
    end: tuple = (0.7, 0.6)


@dataclass
class SynthSceneSpec:
    seed: int = 0
    n_gaussians: int = 500
    width: int = 64
    height: int = 64
    n_views: int = 12
    beta_d: tuple = (0.4, 0.2, 0.1)
    beta_b: tuple = (0.3, 0.3, 0.3)
    b: tuple = (0.1, 0.3, 0.5)
    extent: float = 4.5            # seabed half-width
    tilt: float = 0.35             # seabed slope along world y
    bump: float = 0.15
    near: float = 2.0              # camera distance range to the scene center
    far: float = 6.0
    n_distances: int = 3           # distance levels per viewing axis
    sway: float = 0.35             # lateral spread of the viewing axes
    focal_scale: float = 1.0       # focal length / image width
    init_fraction: float = 1.0
    init_noise: float = 0.02       # std of init point jitter, scene units
    distractor: DistractorSpec | None = None

    def __post_init__(self):
        if min(self.beta_d) < 0 or min(self.beta_b) < 0:
            raise ValueError("medium coefficients must be non-negative")
        if not all(0 <= v <= 1 for v in self.b):
            raise ValueError("backscatter color must lie in [0, 1]")


@dataclass
class GroundTruth:
    beta_d: np.ndarray
    beta_b: np.ndarray
    b: np.ndarray
    clean: list            # J per view
    depth: list            # metric per-pixel distance per view
    static: list           # underwater image without distractor
    distractor_masks: list
    positions: np.ndarray
    colors: np.ndarray
    scales: np.ndarray
    distractor_color: np.ndarray | None = None


def seabed_gaussians(spec: SynthSceneSpec, rng):
    """Jittered grid of flat, opaque Gaussians on z = tilt * y + bumps."""
    k = int(np.floor(np.sqrt(spec.n_gaussians)))
    spacing = 2 * spec.extent / k
    gx, gy = np.meshgrid(np.arange(k), np.arange(k))
    xy = (np.stack([gx.ravel(), gy.ravel()], -1) + 0.5) * spacing - spec.extent
    xy = xy + rng.uniform(-0.25, 0.25, xy.shape) * spacing
    extra = spec.n_gaussians - len(xy)
    if extra > 0:
        xy = np.concatenate([xy, rng.uniform(-spec.extent, spec.extent, (extra, 2))])
    xy = xy[: spec.n_gaussians]
    ph = rng.uniform(0, 2 * np.pi, 2)
    zs = spec.tilt * xy[:, 1] + spec.bump * np.sin(1.3 * xy[:, 0] + ph[0]) * np.cos(0.9 * xy[:, 1] + ph[1])
    pos = np.column_stack([xy, zs])
    # orient each splat with the surface normal of the slope; thin along the normal
    n = np.array([0.0, -spec.tilt, 1.0])
    n /= np.linalg.norm(n)
    angle = np.arccos(n[2])
    rot = np.tile([np.cos(angle / 2), -np.sin(angle / 2), 0.0, 0.0], (len(pos), 1))
    sig = 0.6 * spacing * rng.uniform(0.9, 1.2, len(pos))
    scales = np.column_stack([sig, sig, np.full(len(pos), 0.02 * spacing)])
    colors = rng.uniform(0.15, 0.85, (len(pos), 3))
    return pos, rot, scales, colors


def camera_path(spec: SynthSceneSpec, rng):
    """Cameras on a grid of viewing axes x distance levels, in shuffled frame order.

    Every axis is visited at several distances, so distance and view direction
    vary independently. Held-out frames (every 8th name) are placed at the
    nearest and farthest levels.
    """
    levels = max(1, spec.n_distances)
    n_axes = int(np.ceil(spec.n_views / levels))
    pairs = [(a, l) for l in range(levels) for a in range(n_axes)][: spec.n_views]
    order = [pairs[i] for i in rng.permutation(len(pairs))]
    want = [levels - 1, 0]  # far first, then near
    for k, slot in enumerate(range(0, spec.n_views, 8)):
        lvl = want[k % 2]
        if order[slot][1] != lvl:
            other = next((j for j in range(spec.n_views) if j % 8 and order[j][1] == lvl), None)
            if other is not None:
                order[slot], order[other] = order[other], order[slot]
    frac = np.array([l / max(1, levels - 1) for _, l in order])
    d = spec.far - (spec.far - spec.near) * frac
    phase = rng.uniform(0, 2 * np.pi)
    cams = []
    f = spec.focal_scale * spec.width
    for i, ((a, _), di) in enumerate(zip(order, d)):
        ang = phase + 2 * np.pi * a / n_axes
        # sway around the seabed normal side (0, tilt, -1)
        axis = np.array([spec.sway * np.cos(ang), spec.tilt + spec.sway * np.sin(ang), -1.0])
        axis /= np.linalg.norm(axis)
        q, tr = look_at(di * axis, np.zeros(3))
        cams.append(Camera(i + 1, spec.width, spec.height, f, f, spec.width / 2, spec.height / 2, q, tr))
    return cams, frac


def apply_formation(J, z, beta_d, beta_b, b):
    """Underwater image from clean image and per-pixel distance."""
    z = np.asarray(z)[..., None]
    TD = np.exp(-np.asarray(beta_d) * z)
    TB = np.exp(-np.asarray(beta_b) * z)
    return J * TD + np.asarray(b) * (1.0 - TB)


def render_clean(pos, rot, scales, colors, cam: Camera, background=(0.5, 0.5, 0.5)):
    """Clean image and exact per-pixel distance for one camera (opacity 0.99)."""
    proj = project(pos, rot, np.log(scales), cam)
    z = np.linalg.norm(pos - cam.center, axis=1)
    sp = Splats(proj.mean2d, proj.cov2d, colors, np.full(len(pos), 0.99), z, proj.radius,
                proj.visible)
    out = render(sp, cam.width, cam.height, background)
    cover = 1.0 - out.final_T
    depth = np.where(cover > 1e-6, out.depth / np.maximum(cover, 1e-6), z.max())
    return out.image, depth, cover


def distractor_masks(spec: SynthSceneSpec, train_idx, rng):
    ds = spec.distractor
    H, W = spec.height, spec.width
    side = int(round(np.sqrt(ds.size_frac * H * W)))
    n_app = int(round(ds.view_fraction * len(train_idx)))
    chosen = sorted(rng.choice(train_idx, size=n_app, replace=False)) if n_app else []
    masks = [np.zeros((H, W), bool) for _ in range(spec.n_views)]
    for k, vi in enumerate(chosen):
        s = k / max(1, len(chosen) - 1)
        fx = ds.start[0] + s * (ds.end[0] - ds.start[0])
        fy = ds.start[1] + s * (ds.end[1] - ds.start[1])
        x0 = int(np.clip(round(fx * W), 0, W - side))
        y0 = int(np.clip(round(fy * H), 0, H - side))
        masks[vi][y0:y0 + side, x0:x0 + side] = True
    return masks


def generate(spec: SynthSceneSpec):
    """Build a SceneBundle and its ground truth. Deterministic in `spec.seed`."""
    rng = np.random.default_rng(spec.seed)
    pos, rot, scales, colors = seabed_gaussians(spec, rng)
    cams, _ = camera_path(spec, rng)
    names = [f"frame_{i:03d}.png" for i in range(spec.n_views)]
    bd, bb, b = (np.array(v, dtype=np.float64) for v in (spec.beta_d, spec.beta_b, spec.b))
    clean, depth, static = [], [], []
    for cam in cams:
        J, z, _ = render_clean(pos, rot, scales, colors, cam)
        clean.append(J)
        depth.append(z)
        static.append(apply_formation(J, z, bd, bb, b))
    probe = SceneBundle(cams, [View(n, c.id, np.zeros((spec.height, spec.width, 3)))
                               for n, c in zip(names, cams)], pos[:1], colors[:1])
    train_idx, test_idx = probe.train_idx, probe.test_idx
    masks = [np.zeros((spec.height, spec.width), bool) for _ in cams]
    dcolor = None
    if spec.distractor is not None:
        masks = distractor_masks(spec, train_idx, rng)
        dcolor = np.array(spec.distractor.color, dtype=np.float64)
    views = []
    for i, (n, cam) in enumerate(zip(names, cams)):
        img = static[i].copy()
        img[masks[i]] = dcolor if dcolor is not None else img[masks[i]]
        views.append(View(n, cam.id, np.clip(img, 0, 1), minmax_or_zero(depth[i])))

    n_init = max(1, int(round(spec.init_fraction * len(pos))))
    pick = np.sort(rng.choice(len(pos), size=n_init, replace=False))
    init = pos[pick] + rng.normal(0, spec.init_noise, (n_init, 3))
    train_centers = np.stack([cams[i].center for i in train_idx])
    zbar = np.linalg.norm(pos[pick][:, None] - train_centers[None], axis=2).mean(axis=1)
    init_col = apply_formation(colors[pick], zbar, bd, bb, b)
    bundle = SceneBundle(cams, views, init, np.clip(init_col, 0, 1), train_idx, test_idx)
    gt = GroundTruth(bd, bb, b, clean, depth, static, masks, pos, colors, scales, dcolor)
    return bundle, gt


def write_synth(bundle: SceneBundle, gt: GroundTruth, out_dir, spec: SynthSceneSpec | None = None):
    """Write the bundle in COLMAP layout plus ground_truth.json, masks and clean images."""
    d = Path(out_dir)
    write_colmap(bundle, d)
    (d / "masks").mkdir(exist_ok=True)
    (d / "clean").mkdir(exist_ok=True)
    mask_files = []
    for v, m, J in zip(bundle.views, gt.distractor_masks, gt.clean):
        mp = d / "masks" / v.name
        Image.fromarray(m).save(mp)  # 1-bit PNG
        Image.fromarray(np.clip(np.round(J * 255), 0, 255).astype(np.uint8)).save(d / "clean" / v.name)
        mask_files.append(str(mp.relative_to(d)))
    record = {
        "beta_d": gt.beta_d.tolist(), "beta_b": gt.beta_b.tolist(), "b": gt.b.tolist(),
        "distractor_masks": mask_files,
        "distractor_views": [v.name for v, m in zip(bundle.views, gt.distractor_masks) if m.any()],
        "distractor_color": None if gt.distractor_color is None else gt.distractor_color.tolist(),
        "test_views": [bundle.views[i].name for i in bundle.test_idx],
    }
    if spec is not None:
        record["spec"] = asdict(spec)
    (d / "ground_truth.json").write_text(json.dumps(record, indent=2) + "\n")
    return d


@dataclass
class MediumFit:
    beta_d: np.ndarray
    beta_b: np.ndarray
    b: np.ndarray
    residual: float


def invert_medium(I, J, depth, valid=None, min_rel_spread=1e-3) -> MediumFit:
    """Per-channel nonlinear least squares of the formation model on (I, J, z) triples."""
    I = np.asarray(I, dtype=np.float64).reshape(-1, 3)
    J = np.asarray(J, dtype=np.float64).reshape(-1, 3)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    ok = (z > 0) & np.isfinite(z)
    if valid is not None:
        ok &= np.asarray(valid, bool).reshape(-1)
    I, J, z = I[ok], J[ok], z[ok]
    if len(z) < 3 or (z.max() - z.min()) <= min_rel_spread * max(z.mean(), 1e-12):
        raise InsufficientDepthVariation("pixel depths do not vary enough to separate the terms")
    out = np.zeros((3, 3))
    sq = 0.0
    for c in range(3):
        def resid(p, c=c):
            bd, bb, bc = p
            return J[:, c] * np.exp(-bd * z) + bc * (1 - np.exp(-bb * z)) - I[:, c]

        fit = least_squares(resid, x0=[0.2, 0.2, 0.5], bounds=([0, 1e-6, 0], [10, 10, 1]),
                            xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
        out[c] = fit.x
        sq += float(np.sum(fit.fun**2))
    return MediumFit(out[:, 0], out[:, 1], out[:, 2], float(np.sqrt(sq / (3 * len(z)))))

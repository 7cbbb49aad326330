"""Training loop, rendering from checkpoints, and evaluation metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .bmm import motion_mask
from .camera import Camera
from .config import TrainConfig
from .density import (accumulate, compensate_gradient, densify_and_prune, reset_opacity)
from .errors import DivergedLoss, NoValidPixels
from .gaussians import GaussianCloud
from .losses import (LossTerms, ca_loss, depth_loss, gray_world_loss, rec_loss, ssim_map,
                     total_loss)
from .medium import MediumNet, MediumParams
from .pipeline import backward_view, forward_view
from .raster import coverage_stats
from .scene_io import Checkpoint, SceneBundle
from .sh import MAX_SH_DEGREE

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "phase", "view", "loss", "rec", "depth", "ca", "gray", "psnr",
              "n_gaussians", "inlier_fraction", "b_std")


class Adam:
    """Adam over a dict of arrays; state rows can be remapped when the cloud changes."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name, param, grad, lr):
        g = np.asarray(grad, dtype=np.float64)
        if name not in self.m:
            self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
        v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
        mhat = m / (1 - self.b1**t)
        vhat = v / (1 - self.b2**t)
        return (param - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype)

    def remap(self, origin):
        """Keep rows whose origin >= 0 (from that old row); new rows start at zero."""
        origin = np.asarray(origin)
        for d in (self.m, self.v):
            for k, arr in d.items():
                out = np.zeros((len(origin),) + arr.shape[1:])
                keep = origin >= 0
                out[keep] = arr[origin[keep]]
                d[k] = out

    def reset(self, name):
        if name in self.m:
            self.m[name][:] = 0
            self.v[name][:] = 0


def expon_lr(step, lr_init, lr_final, max_steps):
    if max_steps <= 0:
        return lr_init
    t = np.clip(step / max_steps, 0, 1)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))


def psnr(a, b, valid=None) -> float:
    """PSNR in dB for images in [0, 1]; identical images report 99.0."""
    d = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    if valid is not None:
        valid = np.asarray(valid, bool)
        if not valid.any():
            raise NoValidPixels("mask excludes every pixel")
        d = d[valid]
    mse = float(np.mean(d))
    if mse <= 0:
        return 99.0
    return float(min(99.0, -10 * np.log10(mse)))


@dataclass
class Metrics:
    psnr: float
    ssim: float
    view: str = ""
    note: str = ""


class Trainer:
    """Owns the cloud, the medium net and both optimizers for one run."""

    def __init__(self, bundle: SceneBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        if cfg.threads:
            raster.set_threads(cfg.threads)
        self.dtype = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        _, self.scene_radius = bundle.scene_center_radius()
        self.cloud = GaussianCloud.from_points(bundle.init_points, bundle.init_colors,
                                               cfg.sh_degree, opacity=cfg.init_opacity,
                                               dtype=self.dtype)
        self.net = None if cfg.disable_medium else MediumNet(seed=cfg.seed, dtype=self.dtype)
        self.density = cfg.effective_density()
        self.z_damp_ref = self.density.z_damp_ref or 0.1 * self.scene_radius
        self.opt = Adam(eps=1e-15)
        self.net_opt = Adam(eps=1e-8)
        self.active_sh = 0
        self.T_eps = np.inf
        self.iteration = 0
        self.history: list[dict] = []
        self._queue: list[int] = []
        self.last_mask = None

    # -- helpers ---------------------------------------------------------
    def _next_view(self) -> int:
        if not self._queue:
            self._queue = [int(i) for i in self.rng.permutation(self.bundle.train_idx)]
        return self._queue.pop(0)

    def phase(self, it) -> str:
        return "warmup" if it <= self.cfg.warmup_iters else "main"

    def _background(self):
        return np.zeros(3) if (self.cfg.black_background or self.net is None) else None

    # -- one iteration ---------------------------------------------------
    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration + 1
        phase = self.phase(it)
        if cfg.sh_degree_interval and it % cfg.sh_degree_interval == 0:
            self.active_sh = min(self.active_sh + 1, cfg.sh_degree, MAX_SH_DEGREE)
        vi = self._next_view()
        view = self.bundle.views[vi]
        cam = self.bundle.camera(view.camera_id)
        net = self.net
        cloud = self.cloud
        use_gray = phase == "main" and cfg.gray_world and net is not None
        ctx = forward_view(cloud, net, cam, self.scene_radius, self.active_sh,
                           self._background(), render_clean=use_gray)
        _, scale = total_loss(LossTerms(), cfg.loss, phase)
        terms = LossTerms()
        H, W = view.image.shape[:2]
        d_img = np.zeros((H, W, 3))
        d_depth = d_clean = d_med = None
        mm = None
        if phase == "main":
            omega = None
            if cfg.dynamic:
                mm, self.T_eps = motion_mask(ctx.out.image, view.image, self.T_eps, cfg.bmm)
                omega = mm.omega
                self.last_mask = mm
            terms.rec, g = rec_loss(ctx.out.image, view.image, omega, cfg.loss.lam)
            d_img = scale["rec"] * g
            if use_gray:
                terms.gray, d_clean = gray_world_loss(ctx.clean.image)
                d_clean = scale["gray"] * d_clean
        if not cfg.disable_depth_loss:
            if view.depth is not None:
                terms.depth, gd = depth_loss(ctx.out.depth, view.depth)
                d_depth = scale["depth"] * gd
            if net is not None:
                vis = ctx.proj.visible
                if vis.any():
                    sub = MediumParams(*(a[vis] for a in ctx.medium))
                    terms.ca, gsub = ca_loss(sub, ctx.z[vis])
                    d_med = MediumParams.zeros_like(ctx.medium)
                    for full, part in zip(d_med, gsub):
                        full[vis] = scale["ca"] * part
        total, _ = total_loss(terms, cfg.loss, phase)
        if not np.isfinite(total):
            raise DivergedLoss(f"non-finite loss at iteration {it}")
        grads = backward_view(ctx, cloud, net, d_img, d_depth, d_clean, d_med)

        dens = self.density
        if phase == "main" and it < dens.densify_end:
            covered, _ = coverage_stats(ctx.out, grads.raster)
            # NDC units, so tau keeps its usual 3DGS meaning at any resolution
            gnorm = np.linalg.norm(grads.raster.d_mean2d * (0.5 * np.array([W, H])), axis=1)
            gnorm = np.where(ctx.proj.visible, gnorm, 0.0)
            td = ctx.medium.T_D.mean(axis=1) if ctx.medium is not None else np.ones(len(cloud))
            comp = compensate_gradient(gnorm, td, ctx.z, dens, self.z_damp_ref)
            accumulate(cloud, comp, covered, ctx.proj.visible, dens)
            cloud.max_screen_radius = np.maximum(cloud.max_screen_radius,
                                                 ctx.proj.radius).astype(cloud.dtype)

        self._apply(grads, it, phase)

        if phase == "main" and dens.is_event(it):
            late = bool(dens.opacity_reset_interval) and it > dens.opacity_reset_interval
            self.cloud, origin, stats = densify_and_prune(self.cloud, dens, self.scene_radius,
                                                          self.rng, prune_screen=late)
            self.opt.remap(origin)
            log.debug("iteration %d densify %s", it, stats)
        if (phase == "main" and dens.opacity_reset_interval
                and it % dens.opacity_reset_interval == 0 and it < dens.densify_end):
            reset_opacity(self.cloud)
            self.opt.reset("logit_opacities")

        self.iteration = it
        # spread of the per-Gaussian backscatter color over visible Gaussians
        b_std = 0.0
        if ctx.medium is not None and ctx.proj.visible.any():
            b_std = float(np.std(ctx.medium.b[ctx.proj.visible], axis=0).mean())
        row = dict(iteration=it, phase=phase, view=view.name, loss=total, rec=terms.rec,
                   depth=terms.depth, ca=terms.ca, gray=terms.gray,
                   psnr=psnr(np.clip(ctx.out.image, 0, 1), view.image),
                   n_gaussians=len(self.cloud),
                   inlier_fraction=mm.inlier_fraction if mm is not None else 1.0, b_std=b_std)
        self.history.append(row)
        return row

    def _apply(self, grads, it, phase):
        cfg, lr, c = self.cfg, self.cfg.lr, self.cloud
        pos_lr = expon_lr(it, lr.position_init * self.scene_radius,
                          lr.position_final * self.scene_radius, cfg.iterations)
        c.positions = self.opt.step("positions", c.positions, grads.positions, pos_lr)
        c.rotations = self.opt.step("rotations", c.rotations, grads.rotations, lr.rotation)
        c.log_scales = self.opt.step("log_scales", c.log_scales, grads.log_scales, lr.scale)
        c.logit_opacities = self.opt.step("logit_opacities", c.logit_opacities,
                                          grads.logit_opacities, lr.opacity)
        if phase == "main":
            sh_lr = np.full((1, 1, c.sh_coeffs.shape[-1]), lr.sh_rest)
            sh_lr[..., 0] = lr.sh_dc
            c.sh_coeffs = self.opt.step("sh_coeffs", c.sh_coeffs, grads.sh_coeffs, sh_lr)
        c.normalize_rotations()
        if self.net is not None and grads.net is not None:
            for k, g in grads.net.items():
                self.net.params[k] = self.net_opt.step(k, self.net.params[k], g, lr.mlp)

    # -- whole run -------------------------------------------------------
    def run(self, iterations=None, log_path=None, callback=None):
        n = self.cfg.iterations if iterations is None else iterations
        writer = f = None
        if log_path is not None:
            f = open(log_path, "w", newline="")
            writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore")
            writer.writeheader()
        try:
            for _ in range(n):
                row = self.step()
                if writer is not None and row["iteration"] % max(1, self.cfg.log_every) == 0:
                    writer.writerow(row)
                if callback is not None:
                    callback(self, row)
        finally:
            if f is not None:
                f.close()
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        meta = dict(scene_radius=self.scene_radius, active_sh_degree=self.active_sh,
                    black_background=bool(self.cfg.black_background))
        return Checkpoint(self.cloud.copy(), None if self.net is None else self.net.copy(),
                          self.iteration, self.cfg.digest(), meta)


def train(bundle: SceneBundle, cfg: TrainConfig, log_path=None):
    """Train from the bundle's initial points. Returns (Checkpoint, per-iteration log rows)."""
    tr = Trainer(bundle, cfg)
    ckpt = tr.run(log_path=log_path)
    return ckpt, tr.history


def render_view(ckpt: Checkpoint, camera: Camera, mode="underwater"):
    """Render (image clipped to [0, 1], depth) from a checkpoint.

    "clean" uses the raw Gaussian colors (no medium transform, black void).
    """
    if mode not in ("underwater", "clean"):
        raise ValueError(f"unknown render mode {mode!r}")
    radius = float(ckpt.meta.get("scene_radius", 1.0))
    degree = int(ckpt.meta.get("active_sh_degree", ckpt.gaussians.sh_degree))
    net = ckpt.net if mode == "underwater" else None
    bg = np.zeros(3) if (net is None or ckpt.meta.get("black_background")) else None
    ctx = forward_view(ckpt.gaussians, net, camera, radius, degree, bg)
    return np.clip(ctx.out.image, 0, 1), ctx.out.depth


def evaluate(ckpt: Checkpoint, bundle: SceneBundle, masks=None, views=None, mode="underwater"):
    """PSNR/SSIM per test view. `masks[i]` marks pixels to exclude (True = moving object)."""
    idx = bundle.test_idx if views is None else views
    out = []
    for k, i in enumerate(idx):
        v = bundle.views[i]
        img, _ = render_view(ckpt, bundle.camera(v.camera_id), mode)
        excl = None if masks is None else np.asarray(masks[k], bool)
        out.append(image_metrics(img, v.image, excl, v.name))
    return out


def image_metrics(img, target, exclude=None, name=""):
    valid = None if exclude is None else ~exclude
    if valid is not None and not valid.any():
        return Metrics(float("nan"), float("nan"), name, "NoValidPixels")
    p = psnr(img, target, valid)
    S = ssim_map(img, target).mean(axis=-1)
    s = float(S.mean() if valid is None else S[valid].mean())
    return Metrics(p, s, name)

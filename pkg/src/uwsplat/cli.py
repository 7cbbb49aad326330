"""Command line entry point: ``uwsplat synth|train|render|drain|mask|eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .bmm import motion_mask
from .config import apply_overrides, dump_config, load_config, parse_config_text
from .errors import ConfigError, DivergedLoss, UWSplatError
from .scene_io import load_checkpoint, load_colmap, save_checkpoint
from .train import Trainer, evaluate, render_view

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("uwsplat")


def _save_rgb(path, img):
    Image.fromarray(np.clip(np.round(img * 255), 0, 255).astype(np.uint8)).save(path)


def _build_config(args):
    cfg = load_config(args.config)
    pairs = {}
    for item in args.set or []:
        pairs.update(parse_config_text(item))
    if args.seed is not None:
        pairs["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        pairs["iterations"] = args.iterations
    if getattr(args, "threads", None) is not None:
        pairs["threads"] = args.threads
    for flag, key in (("v1", "disable_medium"), ("v2", "disable_physics_dc"),
                      ("v3", "disable_depth_loss"), ("dynamic", "dynamic")):
        if getattr(args, flag, False):
            pairs[key] = True
    return apply_overrides(cfg, pairs)


def cmd_synth(args):
    from .synth import DistractorSpec, SynthSceneSpec, generate, write_synth

    pairs = {}
    for item in args.set or []:
        pairs.update(parse_config_text(item))
    spec = SynthSceneSpec(seed=args.seed or 0,
                          distractor=DistractorSpec() if args.distractor else None)
    for k, v in pairs.items():
        if not hasattr(spec, k):
            raise ConfigError(f"unknown synth field {k!r}")
        setattr(spec, k, v)
    try:
        spec.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    bundle, gt = generate(spec)
    write_synth(bundle, gt, args.out, spec)
    print(f"wrote {len(bundle.views)} views to {args.out}")


def cmd_train(args):
    cfg = _build_config(args)
    bundle = load_colmap(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    tr = Trainer(bundle, cfg)

    def report(t, row):
        if row["iteration"] % 500 == 0:
            log.info("it %d %s loss %.5f psnr %.2f n %d", row["iteration"], row["phase"],
                     row["loss"], row["psnr"], row["n_gaussians"])

    ckpt = tr.run(log_path=out / "train_log.csv", callback=report)
    save_checkpoint(out / "checkpoint", ckpt)
    print(f"checkpoint written to {out / 'checkpoint'}")


def _selected_views(bundle, which):
    if which == "test":
        return list(bundle.test_idx)
    if which == "train":
        return list(bundle.train_idx)
    return list(range(len(bundle.views)))


def _render_all(args, mode):
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_colmap(args.scene, load_depth=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in _selected_views(bundle, args.views):
        v = bundle.views[i]
        img, _ = render_view(ckpt, bundle.camera(v.camera_id), mode)
        _save_rgb(out / (Path(v.name).stem + ".png"), img)
    print(f"rendered {mode} views to {out}")


def cmd_render(args):
    _render_all(args, "underwater")


def cmd_drain(args):
    _render_all(args, "clean")


def _load_rgb(path):
    try:
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise ConfigError(f"cannot read image {path}: {e}") from None


def _write_masks(out, stem, mm):
    for tag, m in (("omega1", mm.omega1), ("omega2", mm.omega2), ("omega3", mm.omega3),
                   ("omega", mm.omega)):
        Image.fromarray(np.asarray(m, bool)).save(out / f"{stem}_{tag}.png")


def cmd_mask(args):
    cfg = _build_config(args)
    out = Path(args.out)
    if args.rendered or args.target:
        # single image pair; the threshold comes from --t-eps (default: this pair's own quantile)
        if not (args.rendered and args.target):
            raise ConfigError("--rendered and --target go together")
        img, target = _load_rgb(args.rendered), _load_rgb(args.target)
        T_eps = args.t_eps
        if T_eps is None:
            _, T_eps = motion_mask(img, target, np.inf, cfg.bmm)
        out.mkdir(parents=True, exist_ok=True)
        mm, _ = motion_mask(img, target, T_eps, cfg.bmm)
        _write_masks(out, Path(args.target).stem, mm)
        print(f"masks written to {out} (T_eps {T_eps:.6g})")
        return
    if not (args.ckpt and args.scene):
        raise ConfigError("mask needs CKPT SCENE or --rendered/--target")
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_colmap(args.scene, load_depth=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T_eps = np.inf
    for i in _selected_views(bundle, args.views):
        v = bundle.views[i]
        img, _ = render_view(ckpt, bundle.camera(v.camera_id), "underwater")
        mm, T_eps = motion_mask(img, v.image, T_eps, cfg.bmm)
        _write_masks(out, Path(v.name).stem, mm)
    print(f"masks written to {out}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    bundle = load_colmap(args.scene, load_depth=False)
    idx = _selected_views(bundle, args.views)
    masks = None
    if args.masks:
        masks = [np.asarray(Image.open(Path(args.masks) / bundle.views[i].name)).astype(bool)
                 for i in idx]
    rows = [m.__dict__ for m in evaluate(ckpt, bundle, masks, idx, args.mode)]
    ok = [r for r in rows if not r["note"]]
    summary = {"views": rows,
               "mean_psnr": float(np.mean([r["psnr"] for r in ok])) if ok else None,
               "mean_ssim": float(np.mean([r["ssim"] for r in ok])) if ok else None}
    text = json.dumps(summary, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser():
    p = argparse.ArgumentParser(prog="uwsplat", description="Underwater Gaussian splatting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="config override, repeatable")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="write a synthetic underwater scene")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="scene spec field")
    sp.add_argument("--distractor", action="store_true", help="add a moving square")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a COLMAP scene directory")
    sp.add_argument("scene")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--v1", action="store_true", help="no medium (plain SH colors)")
    sp.add_argument("--v2", action="store_true", help="no physics-based density control")
    sp.add_argument("--v3", action="store_true", help="no depth losses")
    sp.add_argument("--dynamic", action="store_true", help="enable the motion mask")
    sp.set_defaults(func=cmd_train)

    for name, fn, text in (("render", cmd_render, "render underwater views"),
                           ("drain", cmd_drain, "render views without the medium")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("ckpt")
        sp.add_argument("scene")
        sp.add_argument("--views", choices=("all", "train", "test"), default="all")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("mask", help="write motion masks for each view or one image pair")
    sp.add_argument("ckpt", nargs="?")
    sp.add_argument("scene", nargs="?")
    common(sp)
    sp.add_argument("--rendered", help="rendered image (pair mode)")
    sp.add_argument("--target", help="target image (pair mode)")
    sp.add_argument("--t-eps", type=float, help="residual threshold in pair mode")
    sp.add_argument("--views", choices=("all", "train", "test"), default="train")
    sp.set_defaults(func=cmd_mask)

    sp = sub.add_parser("eval", help="PSNR/SSIM on held-out views")
    sp.add_argument("ckpt")
    sp.add_argument("scene")
    sp.add_argument("--views", choices=("all", "train", "test"), default="test")
    sp.add_argument("--mode", choices=("underwater", "clean"), default="underwater")
    sp.add_argument("--masks", help="directory of exclusion masks named like the images")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except UWSplatError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

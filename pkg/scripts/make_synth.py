"""Write the two standard synthetic scenes (static and with a moving distractor).

Usage: python scripts/make_synth.py OUT_DIR [--seed N]
"""
import argparse
from pathlib import Path

from uwsplat.synth import DistractorSpec, SynthSceneSpec, generate, write_synth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    for name, spec in (("static", SynthSceneSpec(seed=args.seed)),
                       ("distractor", SynthSceneSpec(seed=args.seed, distractor=DistractorSpec()))):
        bundle, gt = generate(spec)
        write_synth(bundle, gt, out / name, spec)
        print(f"{name}: {len(bundle.views)} views, test {bundle.test_idx} -> {out / name}")


if __name__ == "__main__":
    main()

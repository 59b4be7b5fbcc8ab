#!/usr/bin/env python3
"""End-to-end demo: data, warping, synthesis, try-on images and metrics.

Runs every stage with one command and leaves all artifacts under --out:

    data/            paired dataset (train + test splits, manifest)
    warp/            grouped-flow warping network + attention visualizations
    diffusion/       latent autoencoder + conditional denoiser
    tryon/           generated try-on PNGs for the first test samples
    eval_*.json      warped-garment and try-on metrics on the test split

Usage:
    python scripts/run_full_pipeline.py --out runs/full [--config cfg.json]
        [--warp-steps N] [--diff-steps N] [--tryon-samples K]
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tryonlab.cli import main as cli


def step(title):
    print(f"\n=== {title} [{time.strftime('%H:%M:%S')}] ===", flush=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--warp-steps", type=int, default=None)
    ap.add_argument("--diff-steps", type=int, default=None)
    ap.add_argument("--ae-steps", type=int, default=None)
    ap.add_argument("--tryon-samples", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    c = ["--config", args.config] if args.config else []

    def run(argv):
        code = cli(argv)
        if code != 0:
            print(f"command failed with exit code {code}: {argv}", file=sys.stderr)
            sys.exit(code)

    step("generate dataset")
    run(["gen-data", *c, "--out", str(out / "data")])

    step("train warping network")
    warp = ["train-warp", *c, "--data", str(out / "data"), "--out", str(out / "warp")]
    if args.warp_steps:
        warp += ["--steps", str(args.warp_steps)]
    run(warp)

    step("train autoencoder + denoiser")
    diff = ["train-diffusion", *c, "--data", str(out / "data"),
            "--out", str(out / "diffusion")]
    if args.diff_steps:
        diff += ["--steps", str(args.diff_steps)]
    if args.ae_steps:
        diff += ["--ae-steps", str(args.ae_steps)]
    run(diff)

    step("evaluate warped garments")
    run(["eval", *c, "--data", str(out / "data"), "--mode", "warp",
         "--warp", str(out / "warp" / "warp.ckpt"),
         "--out", str(out / "eval_warp.json")])

    step("evaluate try-on synthesis")
    run(["eval", *c, "--data", str(out / "data"), "--mode", "tryon",
         "--ae", str(out / "diffusion" / "ae.ckpt"),
         "--diffusion", str(out / "diffusion" / "diffusion.ckpt"),
         "--n", "16", "--out", str(out / "eval_tryon.json")])

    step("render try-on images")
    samples = [s for i in range(args.tryon_samples) for s in ("--sample", str(i))]
    run(["try-on", *c, "--data", str(out / "data"), *samples,
         "--ae", str(out / "diffusion" / "ae.ckpt"),
         "--diffusion", str(out / "diffusion" / "diffusion.ckpt"),
         "--out", str(out / "tryon")])

    step("visualize channel groups")
    run(["visualize-groups", *c, "--checkpoint", str(out / "warp" / "warp.ckpt"),
         "--data", str(out / "data"), "--sample", "0",
         "--out", str(out / "warp" / "groups")])

    step("done")
    for name in ("eval_warp.json", "eval_tryon.json"):
        print(f"{name}: {json.loads((out / name).read_text())}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

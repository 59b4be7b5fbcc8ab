"""Command-line entry point binding data generation, training, inference and
evaluation into reproducible workflows.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 missing
prerequisite artifact.  Every command resolves its configuration from
``--config``, then the ``D4_CONFIG`` environment variable, then defaults, and
writes a resolved-config echo beside its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, MissingArtifactError, TrainingDivergedError


def _echo_config(cfg: RunConfig, out_dir, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(cfg.to_dict(), **(extra or {}))
    (out_dir / "config_echo.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def _save_png(path, img: np.ndarray) -> None:
    """Write a [C,H,W] or [H,W] float image in [0,1] as a PNG."""
    from PIL import Image

    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        mode = "RGB"
    else:
        mode = "L"
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def _load_sample_arg(sample: str, data_dir, split: str):
    """Resolve a --sample argument: integer id within a split, or npz path."""
    from .synthdata import TryOnDataset, load_sample

    if sample.lstrip("-").isdigit():
        if data_dir is None:
            raise ConfigError("--data is required when --sample is an id")
        ds = TryOnDataset(data_dir, split)
        idx = int(sample)
        if not 0 <= idx < len(ds):
            raise ConfigError(f"sample id {idx} outside split of size {len(ds)}")
        return ds[idx], idx
    path = _require(sample, "sample file")
    return load_sample(path), None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import build_dataset

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    manifest = build_dataset(cfg.n_train, cfg.n_test, cfg.seed, args.out,
                             resolution=cfg.resolution)
    _echo_config(cfg, args.out)
    print(f"wrote {cfg.n_train}+{cfg.n_test} samples to {args.out} "
          f"(manifest checksum {manifest['checksum'][:12]})")
    return 0


def cmd_train_warp(args) -> int:
    from .deformnet import train_deformnet

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.grouping is not None:
        cfg = cfg.replace(grouping=args.grouping)
    _require(Path(args.data) / "manifest.jsonl", "dataset manifest")
    _echo_config(cfg, args.out)
    summary = train_deformnet(args.data, cfg, args.out, steps=args.steps)
    print(f"train-warp done: {summary['steps']} steps, "
          f"val_l1={summary['final_val_l1']:.5f}, checkpoint={summary['checkpoint']}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .diffusion import train_autoencoder, train_diffusion

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.no_ditp:
        cfg = cfg.replace(use_ditp=False)
    _require(Path(args.data) / "manifest.jsonl", "dataset manifest")
    _echo_config(cfg, args.out)

    if args.ae is not None:
        ae_ckpt = _require(args.ae, "autoencoder checkpoint")
    else:
        ae_summary = train_autoencoder(args.data, cfg, args.out, steps=args.ae_steps)
        if not ae_summary["passed"]:
            print(f"autoencoder reconstruction too weak "
                  f"({ae_summary['held_out_psnr']:.2f} dB < 28 dB); see ae_report.json",
                  file=sys.stderr)
            return 1
        ae_ckpt = ae_summary["checkpoint"]

    warp_ckpt = None
    if cfg.composite_source == "deformnet":
        warp_ckpt = _require(args.warp, "warp checkpoint") if args.warp else None
        if warp_ckpt is None:
            raise ConfigError("composite_source: 'deformnet' requires --warp")
    summary = train_diffusion(args.data, cfg, args.out, ae_ckpt,
                              steps=args.steps, warp_ckpt=warp_ckpt)
    print(f"train-diffusion done: {summary['steps']} steps "
          f"(ditp={summary['use_ditp']}), checkpoint={summary['checkpoint']}")
    return 0


def cmd_try_on(args) -> int:
    import torch

    from .diffusion import load_codec, load_denoiser, make_schedule, sample_tryon

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    codec, _ = load_codec(_require(args.ae, "autoencoder checkpoint"))
    model, meta = load_denoiser(_require(args.diffusion, "diffusion checkpoint"))
    mc = meta["config"]
    schedule = make_schedule(int(mc["timesteps"]), float(mc["beta_start"]),
                             float(mc["beta_end"]))
    steps = args.ddim_steps or int(mc.get("ddim_steps", cfg.ddim_steps))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir, {"ddim_steps": steps, "seed": seed})

    warp_model = None
    if args.warp is not None:
        from .deformnet import load_warp_model
        warp_model, _ = load_warp_model(_require(args.warp, "warp checkpoint"))

    for sample_arg in args.sample:
        s, idx = _load_sample_arg(sample_arg, args.data, args.split)
        agnostic = torch.from_numpy(s.agnostic_composite)
        if warp_model is not None:
            from .diffusion import _deformnet_composites
            agnostic = _deformnet_composites(warp_model, [s]).squeeze(0)
        img = sample_tryon(agnostic, torch.from_numpy(s.garment),
                           torch.from_numpy(s.inpaint_mask), codec, model,
                           schedule, steps, seed,
                           latent_blend=not args.no_latent_blend,
                           per_step_ditp=args.per_step_ditp)
        stem = f"tryon_{idx:05d}" if idx is not None else f"tryon_{Path(sample_arg).stem}"
        _save_png(out_dir / f"{stem}.png", img.numpy())
        np.savez(out_dir / f"{stem}.npz", image=img.numpy().astype(np.float32))
        print(f"wrote {out_dir / (stem + '.png')}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_split

    if args.mode == "warp":
        _require(args.warp, "warp checkpoint")
    else:
        _require(args.ae, "autoencoder checkpoint")
        _require(args.diffusion, "diffusion checkpoint")
    _require(Path(args.data) / "manifest.jsonl", "dataset manifest")
    seed = args.seed if args.seed is not None else 0
    report = evaluate_split(args.data, args.split, args.mode, warp_ckpt=args.warp,
                            ae_ckpt=args.ae, diff_ckpt=args.diffusion,
                            n_samples=args.n, seed=seed, out_json=args.out)
    print(json.dumps({"split": args.split, "mode": args.mode,
                      **report.to_json_dict()}, sort_keys=True))
    return 0


def cmd_visualize_groups(args) -> int:
    import csv

    import torch

    from .deformnet import load_warp_model

    model, meta = load_warp_model(_require(args.checkpoint, "warp checkpoint"))
    model.eval()
    cfg_groups = int(meta["config"].get("groups"))
    if args.groups is not None and args.groups != cfg_groups:
        raise ConfigError(f"--groups {args.groups} does not match checkpoint "
                          f"groups={cfg_groups}")

    s, idx = _load_sample_arg(args.sample, args.data, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        result = model(torch.from_numpy(s.garment).unsqueeze(0),
                       torch.from_numpy(s.condition).unsqueeze(0))
        bundle = result["bundles"][0]                       # finest warping stage
        attn = torch.softmax(bundle["attn_fine"], dim=1)    # [1, K, 1, h, w]
        weights = attn[0, :, 0]                             # [K, h, w]
        total = weights.sum(dim=0)
        if not torch.allclose(total, torch.ones_like(total), atol=1e-5):
            raise RuntimeError("attention maps do not sum to 1 before export")

    for k in range(weights.shape[0]):
        _save_png(out_dir / f"group_{k:02d}.png", weights[k].numpy())

    # channel-to-group assignment of the final decode selection
    rows = _assignment_rows(model, s)
    with open(out_dir / "channel_groups.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "group"])
        writer.writerows(rows)
    print(f"wrote {weights.shape[0]} attention maps and channel_groups.csv "
          f"to {out_dir}")
    return 0


def _assignment_rows(model, s):
    import torch

    with torch.no_grad():
        _, _, _, l0 = model.encode(torch.from_numpy(s.garment).unsqueeze(0),
                                   torch.from_numpy(s.condition).unsqueeze(0))
        hard = model.make_decode_mask(l0).hard[0]   # [K, Q]
    groups = torch.argmax(hard, dim=0)              # [Q]
    return [(int(c), int(groups[c])) for c in range(hard.shape[1])]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tryonlab",
        description="Grouped-flow garment warping and differential-diffusion try-on.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="JSON config path (falls back to $D4_CONFIG, then defaults)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("gen-data", help="generate a paired try-on dataset")
    add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-warp", help="train the warping network")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--grouping", choices=["dsdm", "fixed", "vanilla"], default=None)
    p.set_defaults(func=cmd_train_warp)

    p = sub.add_parser("train-diffusion",
                       help="train the latent autoencoder (unless --ae) and denoiser")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ae", default=None, help="reuse an autoencoder checkpoint")
    p.add_argument("--warp", default=None,
                   help="warp checkpoint (required for composite_source=deformnet)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ae-steps", type=int, default=None)
    p.add_argument("--no-ditp", action="store_true",
                   help="train without the differential path (ablation)")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("try-on", help="generate try-on images for samples")
    add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--sample", action="append", required=True,
                   help="sample id within --data/--split, or a sample .npz path "
                        "(repeatable)")
    p.add_argument("--ae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--warp", default=None,
                   help="rebuild the incomplete composite with predicted warps")
    p.add_argument("--out", required=True)
    p.add_argument("--ddim-steps", type=int, default=None)
    p.add_argument("--no-latent-blend", action="store_true")
    p.add_argument("--per-step-ditp", action="store_true")
    p.set_defaults(func=cmd_try_on)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--mode", required=True, choices=["warp", "tryon"])
    p.add_argument("--warp", default=None)
    p.add_argument("--ae", default=None)
    p.add_argument("--diffusion", default=None)
    p.add_argument("--n", type=int, default=None, help="limit evaluated samples")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize-groups",
                       help="export fine attention maps and channel grouping")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=None,
                   help="expected group count (mismatch with checkpoint fails)")
    p.set_defaults(func=cmd_visualize_groups)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc} {exc.diagnostics}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Reference image metrics (L1, PSNR, SSIM) and split-level evaluation.

Everything here computes in float64 regardless of input dtype.  PSNR of
identical images is +inf, serialized as the string ``"inf"`` in JSON reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _as_f64(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected [H,W] or [C,H,W] image, got shape {arr.shape}")
    return arr


def l1(a, b) -> float:
    x, y = _as_f64(a), _as_f64(b)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    return float(np.mean(np.abs(x - y)))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf."""
    x, y = _as_f64(a), _as_f64(b)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean local SSIM over valid (fully inside) Gaussian windows.

    Multichannel inputs are scored per channel and averaged.
    """
    x, y = _as_f64(a), _as_f64(b)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    h, w = x.shape[-2:]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}-pixel window")
    win = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    scores = []
    for c in range(x.shape[0]):
        xv = sliding_window_view(x[c], (window, window))
        yv = sliding_window_view(y[c], (window, window))
        mu_x = np.einsum("ijkl,kl->ij", xv, win)
        mu_y = np.einsum("ijkl,kl->ij", yv, win)
        mu_x2 = np.einsum("ijkl,kl->ij", xv * xv, win)
        mu_y2 = np.einsum("ijkl,kl->ij", yv * yv, win)
        mu_xy = np.einsum("ijkl,kl->ij", xv * yv, win)
        var_x = mu_x2 - mu_x * mu_x
        var_y = mu_y2 - mu_y * mu_y
        cov = mu_xy - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    l1: float
    psnr_db: float
    ssim: float
    n_samples: int

    def to_json_dict(self) -> dict:
        return {
            "l1": self.l1,
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "ssim": self.ssim,
            "n_samples": self.n_samples,
        }


def evaluate_pairs(pairs) -> tuple[MetricReport, list[dict]]:
    """Aggregate (prediction, target) pairs into a MetricReport.

    Aggregation is the arithmetic mean of per-sample values (PSNR mean is
    +inf if any sample is a perfect match).  Also returns the per-sample
    records for inspection.
    """
    per_sample = []
    for pred, target in pairs:
        per_sample.append({"l1": l1(pred, target), "psnr_db": psnr(pred, target),
                           "ssim": ssim(pred, target)})
    if not per_sample:
        raise ValueError("no samples to evaluate")
    report = MetricReport(
        l1=float(np.mean([r["l1"] for r in per_sample])),
        psnr_db=float(np.mean([r["psnr_db"] for r in per_sample])),
        ssim=float(np.mean([r["ssim"] for r in per_sample])),
        n_samples=len(per_sample),
    )
    return report, per_sample


def evaluate_split(dataset_dir, split: str, mode: str, warp_ckpt=None,
                   ae_ckpt=None, diff_ckpt=None, n_samples: int | None = None,
                   ddim_steps: int | None = None, seed: int = 0,
                   out_json=None, log=print) -> MetricReport:
    """Evaluate trained checkpoints over a dataset split.

    mode='warp' scores the predicted warped garment against the rendering
    ground truth; mode='tryon' scores generated images against the person
    images (per-sample generation seeds are ``seed + index``).
    """
    import torch

    from .synthdata import TryOnDataset

    ds = TryOnDataset(dataset_dir, split)
    n = len(ds) if n_samples is None else min(n_samples, len(ds))
    if n == 0:
        raise ValueError(f"split '{split}' is empty")

    if mode == "warp":
        from .deformnet import load_warp_model
        model, _ = load_warp_model(warp_ckpt)
        model.eval()

        def pairs():
            with torch.no_grad():
                for i in range(n):
                    s = ds[i]
                    out = model(torch.from_numpy(s.garment).unsqueeze(0),
                                torch.from_numpy(s.condition).unsqueeze(0))
                    yield out["outputs"][0].squeeze(0).numpy(), s.gt_warped_garment
    elif mode == "tryon":
        from .diffusion import (load_codec, load_denoiser, make_schedule,
                                sample_tryon)
        codec, _ = load_codec(ae_ckpt)
        model, meta = load_denoiser(diff_ckpt)
        cfg = meta["config"]
        schedule = make_schedule(int(cfg["timesteps"]), float(cfg["beta_start"]),
                                 float(cfg["beta_end"]))
        steps = ddim_steps or int(cfg.get("ddim_steps", 50))

        def pairs():
            for i in range(n):
                s = ds[i]
                img = sample_tryon(torch.from_numpy(s.agnostic_composite),
                                   torch.from_numpy(s.garment),
                                   torch.from_numpy(s.inpaint_mask),
                                   codec, model, schedule, steps, seed + i)
                yield img.numpy(), s.person
    else:
        raise ValueError(f"unknown eval mode: {mode!r}")

    report, _ = evaluate_pairs(pairs())
    payload = {"split": split, "mode": mode, **report.to_json_dict()}
    if out_json is not None:
        out_json = Path(out_json)
        out_json.parent.mkdir(parents=True, exist_ok=True)
        out_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"[eval {mode}/{split}] n={report.n_samples} l1={report.l1:.5f} "
        f"psnr={report.psnr_db:.2f} ssim={report.ssim:.4f}")
    return report

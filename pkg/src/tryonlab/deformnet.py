"""Garment deformation network.

Two feature pyramids (garment / condition) feed a cascade of group warping
blocks, one per scale, coarse to fine.  At each scale K per-group flow and
attention maps are estimated jointly; channels of the warped feature are
gated per group by a selection mask, each group is warped by its own composed
flow, and the K warped stacks are fused with per-pixel softmax attention.
Fine flows propagate to the next finer scale where they compose with that
scale's coarse flows (skipped at the coarsest scale, which has no
predecessor).  A lightweight garment encoder supplies per-scale decode
features; warping those and decoding each through a small RGB head yields
multi-scale warped-garment predictions, the finest at full resolution.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoints import save_checkpoint
from .config import RunConfig
from .errors import ConfigError, TrainingDivergedError
from .features import FixedFeatureExtractor, gram_matrix
from .geometry import compose_flows, grid_sample, upsample_flow
from .selector import DynamicSelector, SelectionMask, fixed_partition_mask
from .synthdata import TryOnDataset, CONDITION_CHANNELS


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class FeaturePyramid(nn.Module):
    """Strided conv encoder emitting one feature map per scale."""

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        stages = []
        ch = in_channels
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(ch, w, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
                nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.1),
            ))
            ch = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out  # index 0 = finest scale


class RefinePyramid(nn.Module):
    """Top-down FPN pass: coarse context folded into finer levels via 1x1 convs."""

    def __init__(self, widths: tuple[int, ...]):
        super().__init__()
        self.adapt = nn.ModuleList(nn.Conv2d(w, w, 1) for w in widths)
        self.lateral = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 1) for i in range(len(widths) - 1)
        )

    def forward(self, stages: list[torch.Tensor]) -> list[torch.Tensor]:
        n = len(stages)
        out = [None] * n
        out[n - 1] = self.adapt[n - 1](stages[n - 1])
        for i in range(n - 2, -1, -1):
            up = F.interpolate(out[i + 1], scale_factor=2, mode="nearest")
            out[i] = self.adapt[i](stages[i]) + self.lateral[i](up)
        return out


class LightweightEncoder(nn.Module):
    """Small shared conv stack producing decode features at any resolution."""

    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class GroupFlowEstimator(nn.Module):
    """Joint per-group flow/attention head over concatenated feature pairs.

    A shared 3x3 stem mixes the two inputs, then grouped convolutions keep the
    K estimators separate; the final (zero-initialized) grouped conv emits
    3 channels per group: an (x, y) flow and an attention logit.  Zero init
    means training starts from the identity warp.
    """

    def __init__(self, in_channels: int, groups: int, stem_width: int, group_width: int):
        super().__init__()
        self.groups = groups
        gw = group_width
        self.stem = nn.Conv2d(in_channels, stem_width, 3, padding=1)
        self.conv1 = nn.Conv2d(stem_width, groups * gw, 3, padding=1, groups=groups)
        self.conv2 = nn.Conv2d(groups * gw, groups * gw, 3, padding=1, groups=groups)
        self.head = nn.Conv2d(groups * gw, groups * 3, 3, padding=1, groups=groups)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor):
        x = torch.cat([a, b], dim=1)
        x = F.leaky_relu(self.stem(x), 0.1)
        x = F.leaky_relu(self.conv1(x), 0.1)
        x = F.leaky_relu(self.conv2(x), 0.1)
        y = self.head(x)
        bsz, _, h, w = y.shape
        y = y.view(bsz, self.groups, 3, h, w)
        return y[:, :, :2], y[:, :, 2:3]  # flows [B,K,2,H,W], attn logits [B,K,1,H,W]


# ---------------------------------------------------------------------------
# disentangled warping
# ---------------------------------------------------------------------------

def _stack_groups(flows) -> torch.Tensor:
    """Normalize list-of-[2,H,W] / list-of-[B,2,H,W] / [B,K,2,H,W] to batched."""
    if isinstance(flows, (list, tuple)):
        flows = torch.stack([f if f.dim() == 4 else f.unsqueeze(0) for f in flows], dim=1)
    if flows.dim() == 4:  # [K, 2, H, W] from an unbatched caller
        flows = flows.unsqueeze(0)
    return flows


def _group_apply(fn, grouped: torch.Tensor, *others):
    b, k = grouped.shape[:2]
    flat = [t.reshape(b * k, *t.shape[2:]) for t in (grouped, *others)]
    out = fn(*flat)
    return out.view(b, k, *out.shape[1:])


def disentangled_warp(primary_flows, secondary_flows, attn_logits, mask, x: torch.Tensor) -> torch.Tensor:
    """Warp ``x`` with K group flows and fuse by attention.

    Per group j the effective flow composes the group's primary and secondary
    flow (``secondary_flows=None`` skips composition, as at the coarsest
    scale); the channels of ``x`` are gated by row j of the selection mask
    before warping; the K warped stacks are combined with softmax weights over
    the K attention logits at every pixel.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    primary = _stack_groups(primary_flows)
    attn = _stack_groups(attn_logits)
    rows = mask.straight_through if isinstance(mask, SelectionMask) else mask
    if rows.dim() == 2:
        rows = rows.unsqueeze(0)
    k = primary.shape[1]
    if attn.shape[1] != k or rows.shape[1] != k:
        raise ValueError(
            f"group count mismatch: flows K={k}, attn K={attn.shape[1]}, mask K={rows.shape[1]}"
        )
    if rows.shape[-1] != x.shape[1]:
        raise ValueError(f"mask has Q={rows.shape[-1]} but x has {x.shape[1]} channels")

    if secondary_flows is not None:
        secondary = _stack_groups(secondary_flows)
        if secondary.shape != primary.shape:
            raise ValueError("primary/secondary flow shapes differ")
        flows = _group_apply(compose_flows, primary, secondary)
    else:
        flows = primary

    b, q, h, w = x.shape
    rows_b = rows if rows.shape[0] == b else rows.expand(b, -1, -1)
    gated = x.unsqueeze(1) * rows_b.unsqueeze(-1).unsqueeze(-1)      # [B,K,Q,H,W]
    warped = _group_apply(grid_sample, gated, flows.reshape(b, k, 2, h, w))
    weights = torch.softmax(attn, dim=1)                              # [B,K,1,H,W]
    out = (weights * warped.view(b, k, q, h, w)).sum(dim=1)
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

class WarpModel(nn.Module):
    """Full deformation network with selectable grouping mode.

    ``grouping`` is one of ``dsdm`` (learned dynamic selection), ``fixed``
    (static contiguous channel partition) or ``vanilla`` (single group, i.e.
    an ordinary single-flow warper).
    """

    def __init__(self, cfg: RunConfig, grouping: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.grouping = grouping or cfg.grouping
        if self.grouping not in ("dsdm", "fixed", "vanilla"):
            raise ConfigError(f"grouping: unknown mode {self.grouping!r}")
        self.levels = cfg.pyramid_levels
        self.groups = 1 if self.grouping == "vanilla" else cfg.groups
        widths = cfg.encoder_widths

        self.garment_pyramid = FeaturePyramid(3, widths)
        self.condition_pyramid = FeaturePyramid(CONDITION_CHANNELS, widths)
        self.garment_fpn = RefinePyramid(widths)
        self.condition_fpn = RefinePyramid(widths)
        self.phi = LightweightEncoder(cfg.phi_width)

        gw = cfg.vanilla_width if self.grouping == "vanilla" else cfg.group_width
        stem = cfg.estimator_stem_width
        self.coarse_estimators = nn.ModuleList(
            GroupFlowEstimator(2 * w, self.groups, stem, gw) for w in widths
        )
        self.fine_estimators = nn.ModuleList(
            GroupFlowEstimator(2 * w, self.groups, stem, gw) for w in widths
        )

        if self.grouping == "dsdm":
            self.warp_selectors = nn.ModuleList(
                DynamicSelector(w, self.groups) for w in widths
            )
            self.decode_selector = DynamicSelector(cfg.phi_width, self.groups)

        # one RGB head per supervision point: full resolution + every scale
        self.decode_heads = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cfg.phi_width, cfg.phi_width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(cfg.phi_width, 3, 3, padding=1), nn.Sigmoid(),
            )
            for _ in range(self.levels + 1)
        )

    # -- selection masks ----------------------------------------------------
    def _const_mask(self, channels: int, batch: int, device) -> SelectionMask:
        rows = fixed_partition_mask(self.groups, channels, device=device)
        rows = rows.unsqueeze(0).expand(batch, -1, -1)
        return SelectionMask(hard=rows, soft=rows, straight_through=rows, tau=1.0)

    def make_warp_mask(self, g_i: torch.Tensor, scale: int,
                       generator=None, sample_noise: bool = False) -> SelectionMask:
        if self.grouping == "dsdm":
            return self.warp_selectors[scale](g_i, generator=generator, sample_noise=sample_noise)
        return self._const_mask(g_i.shape[1], g_i.shape[0], g_i.device)

    def make_decode_mask(self, l_i: torch.Tensor,
                         generator=None, sample_noise: bool = False) -> SelectionMask:
        if self.grouping == "dsdm":
            return self.decode_selector(l_i, generator=generator, sample_noise=sample_noise)
        return self._const_mask(l_i.shape[1], l_i.shape[0], l_i.device)

    # -- encoders -----------------------------------------------------------
    def encode(self, garment: torch.Tensor, condition: torch.Tensor):
        """Pyramids (g, o, l) plus the full-resolution decode feature l0."""
        g = self.garment_fpn(self.garment_pyramid(garment))
        o = self.condition_fpn(self.condition_pyramid(condition))
        l = []
        x = garment
        for _ in range(self.levels):
            x = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
            l.append(self.phi(x))
        l0 = self.phi(garment)
        return g, o, l, l0

    # -- one group warping block -------------------------------------------
    def dsdm_forward(self, scale: int, g_i, o_i, l_i, mask_g: SelectionMask,
                     mask_l: SelectionMask, prev_fine: torch.Tensor | None):
        """Run the block at ``scale`` (0 = finest).  ``prev_fine`` holds the
        coarser block's fine flows, already at that coarser resolution; it is
        None only at the coarsest scale, where no composition happens."""
        if scale < self.levels - 1 and prev_fine is None:
            raise ValueError(f"scale {scale} requires fine flows from scale {scale + 1}")
        coarse, attn_c = self.coarse_estimators[scale](g_i, o_i)
        if prev_fine is None:
            secondary = None
            coarse_composed = coarse
        else:
            secondary = _group_apply(upsample_flow, prev_fine)
            coarse_composed = _group_apply(compose_flows, coarse, secondary)
        g_hat = disentangled_warp(coarse, secondary, attn_c, mask_g, g_i)
        fine, attn_f = self.fine_estimators[scale](g_hat, o_i)
        decode_flow = _group_apply(compose_flows, fine, coarse_composed)
        l_hat = disentangled_warp(decode_flow, None, attn_f, mask_l, l_i)
        bundle = {
            "coarse": coarse, "coarse_composed": coarse_composed, "fine": fine,
            "attn_coarse": attn_c, "attn_fine": attn_f, "decode_flow": decode_flow,
        }
        return bundle, g_hat, l_hat

    # -- decoding -----------------------------------------------------------
    def decode_warped(self, l_hats: list[torch.Tensor]) -> list[torch.Tensor]:
        """RGB prediction per supervision point; index 0 is full resolution."""
        return [head(feat) for head, feat in zip(self.decode_heads, l_hats)]

    # -- full forward -------------------------------------------------------
    def forward(self, garment: torch.Tensor, condition: torch.Tensor,
                generator=None, sample_noise: bool = False) -> dict:
        squeeze = garment.dim() == 3
        if squeeze:
            garment = garment.unsqueeze(0)
            condition = condition.unsqueeze(0)
        g, o, l, l0 = self.encode(garment, condition)

        bundles = [None] * self.levels
        l_hats = [None] * self.levels
        prev_fine = None
        for scale in range(self.levels - 1, -1, -1):
            mask_g = self.make_warp_mask(g[scale], scale, generator, sample_noise)
            mask_l = self.make_decode_mask(l[scale], generator, sample_noise)
            bundles[scale], _, l_hats[scale] = self.dsdm_forward(
                scale, g[scale], o[scale], l[scale], mask_g, mask_l, prev_fine
            )
            prev_fine = bundles[scale]["fine"]

        # full-resolution decode: upsample the finest composed flows/attention
        flow0 = _group_apply(upsample_flow, bundles[0]["decode_flow"])
        attn0 = F.interpolate(
            bundles[0]["attn_fine"].flatten(1, 2), scale_factor=2,
            mode="bilinear", align_corners=True,
        ).unsqueeze(2)
        mask_l0 = self.make_decode_mask(l0, generator, sample_noise)
        l_hat0 = disentangled_warp(flow0, None, attn0, mask_l0, l0)

        outputs = self.decode_warped([l_hat0] + l_hats)
        result = {"outputs": outputs, "bundles": bundles, "full_flow": flow0,
                  "full_attn": attn0, "warped_features": [l_hat0] + l_hats}
        if squeeze:
            result["outputs"] = [t.squeeze(0) for t in outputs]
        return result


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class DeformLossReport:
    l_mae: torch.Tensor
    l_prec: torch.Tensor
    l_style: torch.Tensor
    total: torch.Tensor
    lambda_style: float

    def to_floats(self) -> dict:
        return {
            "l_mae": float(self.l_mae.detach()), "l_prec": float(self.l_prec.detach()),
            "l_style": float(self.l_style.detach()), "total": float(self.total.detach()),
            "lambda_style": self.lambda_style,
        }


def _halve(x: torch.Tensor, times: int) -> torch.Tensor:
    for _ in range(times):
        x = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
    return x


def deform_loss(outputs: list[torch.Tensor], target: torch.Tensor,
                feature_extractor, lambda_style: float) -> DeformLossReport:
    """Multi-scale L1 plus perceptual and Gram-style terms on the finest scale.

    ``outputs[0]`` must be the full-resolution prediction; each further entry
    is compared against a bilinearly halved target.  The perceptual terms use
    the provided frozen extractor's per-layer activations.
    """
    if feature_extractor is None or getattr(feature_extractor, "num_layers", 0) < 1:
        raise ConfigError("feature_extractor: need at least one feature layer")
    if target.dim() == 3:
        target = target.unsqueeze(0)
    outputs = [o.unsqueeze(0) if o.dim() == 3 else o for o in outputs]

    l_mae = outputs[0].new_zeros(())
    for i, out in enumerate(outputs):
        l_mae = l_mae + F.l1_loss(out, _halve(target, i))

    feats_out = feature_extractor.features(outputs[0])
    feats_tgt = feature_extractor.features(target)
    l_prec = outputs[0].new_zeros(())
    l_style = outputs[0].new_zeros(())
    for fo, ft in zip(feats_out, feats_tgt):
        l_prec = l_prec + F.l1_loss(fo, ft)
        l_style = l_style + F.l1_loss(gram_matrix(fo), gram_matrix(ft))

    total = l_mae + l_prec + lambda_style * l_style
    return DeformLossReport(l_mae=l_mae, l_prec=l_prec, l_style=l_style,
                            total=total, lambda_style=lambda_style)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_tensors(dataset: TryOnDataset, indices) -> dict:
    samples = [dataset[int(i)] for i in indices]
    return {
        "garment": torch.from_numpy(np.stack([s.garment for s in samples])),
        "condition": torch.from_numpy(np.stack([s.condition for s in samples])),
        "target": torch.from_numpy(np.stack([s.gt_warped_garment for s in samples])),
    }


@torch.no_grad()
def validate_warp(model: WarpModel, dataset: TryOnDataset, n_samples: int,
                  batch: int = 16) -> float:
    """Mean full-resolution L1 against the ground-truth warped garment."""
    was_training = model.training
    model.eval()
    n = min(n_samples, len(dataset))
    total = 0.0
    for start in range(0, n, batch):
        idx = range(start, min(start + batch, n))
        tensors = _batch_tensors(dataset, idx)
        out = model(tensors["garment"], tensors["condition"])["outputs"][0]
        total += float(torch.abs(out - tensors["target"]).mean(dim=(1, 2, 3)).sum())
    if was_training:
        model.train()
    return total / n


def train_deformnet(dataset_dir, config: RunConfig, out_dir,
                    grouping: str | None = None, steps: int | None = None,
                    log=print) -> dict:
    """Train the deformation network; writes checkpoints, logs and a summary.

    Returns a summary dict with the final validation L1 and artifact paths.
    Raises TrainingDivergedError (with the offending batch indices) if the
    loss ever becomes non-finite.
    """
    cfg = config
    steps = steps or cfg.warp_steps
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds = TryOnDataset(dataset_dir, "train")
    val_ds = TryOnDataset(dataset_dir, "test")

    torch.manual_seed(cfg.seed)
    model = WarpModel(cfg, grouping=grouping)
    model.train()
    extractor = FixedFeatureExtractor(cfg.feature_extractor_seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.warp_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    config_echo = dict(cfg.to_dict(), grouping=model.grouping, warp_steps=steps)
    (out_dir / "config.json").write_text(json.dumps(config_echo, indent=2, sort_keys=True) + "\n")
    log_path = out_dir / "train_warp.jsonl"
    history = []
    t0 = time.time()

    with open(log_path, "w") as log_file:
        for step in range(1, steps + 1):
            idx = torch.randint(len(train_ds), (cfg.warp_batch,), generator=gen)
            tensors = _batch_tensors(train_ds, idx.tolist())
            out = model(tensors["garment"], tensors["condition"],
                        generator=gen, sample_noise=True)
            report = deform_loss(out["outputs"], tensors["target"], extractor, cfg.lambda_style)
            if not torch.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite deformation loss at step {step}",
                    diagnostics={"step": step, "batch_indices": idx.tolist(),
                                 "losses": {k: str(v) for k, v in report.to_floats().items()}},
                )
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()

            if step % cfg.log_every == 0 or step == steps:
                entry = dict(report.to_floats(), step=step)
                history.append(entry)
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if step % cfg.val_every == 0 or step == steps:
                val_l1 = validate_warp(model, val_ds, cfg.val_samples)
                entry = {"step": step, "val_l1": val_l1}
                history.append(entry)
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
                log(f"[warp/{model.grouping}] step {step}/{steps} val_l1={val_l1:.5f}")
                save_checkpoint(out_dir / "warp.ckpt", "warp", model, config_echo,
                                trained_steps=step)

    final_val = validate_warp(model, val_ds, cfg.val_samples)
    save_checkpoint(out_dir / "warp.ckpt", "warp", model, config_echo, trained_steps=steps)
    summary = {
        "grouping": model.grouping, "steps": steps, "final_val_l1": final_val,
        "seconds": time.time() - t0, "checkpoint": str(out_dir / "warp.ckpt"),
        "log": str(log_path),
    }
    (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_warp_model(ckpt_path, cfg_override: RunConfig | None = None) -> tuple[WarpModel, dict]:
    from .checkpoints import load_checkpoint

    state, meta = load_checkpoint(ckpt_path, kind="warp")
    cfg = cfg_override or RunConfig.from_dict(
        {k: v for k, v in meta["config"].items() if k in RunConfig.__dataclass_fields__}
    )
    model = WarpModel(cfg, grouping=meta["config"].get("grouping"))
    model.load_state_dict(state)
    model.eval()
    return model, meta

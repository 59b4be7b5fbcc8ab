"""Differentiable flow-field primitives: sampling, upsampling, composition.

A flow field is a [2, H, W] (or [B, 2, H, W]) tensor of per-pixel
displacements in *normalized* coordinates: the image spans [-1, 1] along each
axis with align_corners conventions (pixel i sits at -1 + 2i/(n-1)), channel 0
displaces x and channel 1 displaces y.  Normalized displacements make flows
value-compatible across pyramid scales, so upsampling never rescales them.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = ["base_grid", "grid_sample", "upsample_flow", "compose_flows"]


def _check_pair(field: torch.Tensor, flow: torch.Tensor) -> None:
    if flow.shape[-3] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {tuple(flow.shape)}")
    if field.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"spatial shape mismatch: field {tuple(field.shape)} vs flow {tuple(flow.shape)}"
        )


def base_grid(h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Identity sampling grid [H, W, 2] in normalized coordinates (x, y last dim)."""
    ys = torch.linspace(-1.0, 1.0, h, device=device, dtype=dtype) if h > 1 else torch.zeros(1, device=device, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, device=device, dtype=dtype) if w > 1 else torch.zeros(1, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=-1)


def grid_sample(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``field`` at positions displaced by ``flow``.

    out(:, y, x) = field evaluated at (x_n + flow_x, y_n + flow_y), where
    (x_n, y_n) is the normalized position of the output pixel.  Samples that
    land outside the image are clamped to the border.  Differentiable in both
    arguments.  Accepts [C, H, W] / [2, H, W] or batched [B, C, H, W] /
    [B, 2, H, W] inputs.
    """
    _check_pair(field, flow)
    squeeze = field.dim() == 3
    if squeeze:
        field = field.unsqueeze(0)
        flow = flow.unsqueeze(0)
    if field.dim() != 4 or flow.dim() != 4:
        raise ValueError("expected rank-3 or rank-4 inputs")
    if field.shape[0] != flow.shape[0]:
        raise ValueError("batch size mismatch between field and flow")
    b, _, h, w = flow.shape
    grid = base_grid(h, w, device=field.device, dtype=field.dtype)
    grid = grid.unsqueeze(0) + flow.permute(0, 2, 3, 1)
    out = F.grid_sample(field, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.squeeze(0) if squeeze else out


def upsample_flow(flow: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinearly upsample a flow field by 2x per axis.

    Displacement values are left untouched: they are normalized, so the same
    value means the same fraction of the image at every resolution.
    """
    if factor != 2:
        raise ValueError(f"only factor=2 upsampling is supported, got {factor}")
    squeeze = flow.dim() == 3
    if squeeze:
        flow = flow.unsqueeze(0)
    if flow.shape[-3] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {tuple(flow.shape)}")
    out = F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=True)
    return out.squeeze(0) if squeeze else out


def compose_flows(inner: torch.Tensor, outer: torch.Tensor, additive: bool = True) -> torch.Tensor:
    """Displacement of applying ``inner`` first, then ``outer``.

    result(p) = inner(p) + grid_sample(outer, inner)(p).  Both flows must share
    one shape; callers upsample an outer flow coming from a coarser scale
    before composing.  With ``additive=False`` the result is only the
    resampled outer flow (the inner displacement is dropped); this variant
    exists for comparison and is not used by the pipeline.
    """
    if inner.shape != outer.shape:
        raise ValueError(
            f"flow shape mismatch: inner {tuple(inner.shape)} vs outer {tuple(outer.shape)}"
        )
    warped_outer = grid_sample(outer, inner)
    if not additive:
        return warped_outer
    return inner + warped_outer

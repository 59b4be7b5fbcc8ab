"""Fixed random-filter feature extractor for perceptual and style terms.

A frozen, seeded three-stage conv stack stands in for a pretrained perceptual
backbone: random fixed filters still produce feature statistics that react to
structure and texture, which is all the perceptual/style losses need at this
scale.  The extractor is pluggable — anything exposing ``features(x) ->
list[Tensor]`` works in its place.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


class FixedFeatureExtractor(nn.Module):
    """Three downsampling conv stages with frozen, seed-determined weights."""

    def __init__(self, seed: int = 1234, widths: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        in_ch = 3
        convs = []
        for i, out_ch in enumerate(widths):
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen)
                conv.weight.copy_(w * (2.0 / (in_ch * 9)) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def num_layers(self) -> int:
        return len(self.convs)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activations for [B, 3, H, W] (or [3, H, W]) input."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        out = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            out.append(x)
        return out

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.features(x)


class IdentityFeatureExtractor(nn.Module):
    """Single-layer pass-through extractor, mainly for tests and debugging."""

    num_layers = 1

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return [x]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.features(x)


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalized by C*H*W; accepts [C,H,W] or [B,C,H,W]."""
    squeeze = feat.dim() == 3
    if squeeze:
        feat = feat.unsqueeze(0)
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    gram = flat @ flat.transpose(1, 2) / (c * h * w)
    return gram.squeeze(0) if squeeze else gram

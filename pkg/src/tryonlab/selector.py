"""Dynamic grouping of feature channels into K semantic groups.

Two small conv projections turn a feature map into a [K, Q] self-similarity
matrix; Gumbel-Softmax over the K axis then assigns every one of the Q
channels to exactly one group.  The assignment is hard in the forward pass and
uses the soft distribution's gradient in the backward pass (straight-through),
so the grouping stays trainable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError

#: Hard lower bound applied to the learnable temperature.
TAU_FLOOR = 0.05

#: Numerical floor for uniform samples inside the Gumbel transform.
_GUMBEL_EPS = 1e-20


@dataclass
class SelectionMask:
    """Channel-to-group assignment in three coupled views.

    ``hard`` has one-hot columns (each channel in exactly one group), ``soft``
    is column-stochastic, and ``straight_through`` equals ``hard`` in value
    while routing gradients through ``soft``.  Arrays are [K, Q] or [B, K, Q].
    """

    hard: torch.Tensor
    soft: torch.Tensor
    straight_through: torch.Tensor
    tau: float


def similarity_from_projections(s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
    """Contract two flattened projections into the similarity matrix.

    s1 is [K, H*W] (or [B, K, H*W]), s2 is [Q, H*W] (or batched); the result
    is s1 @ s2^T with shape [K, Q] (or [B, K, Q]).
    """
    if s1.shape[-1] != s2.shape[-1]:
        raise ValueError(
            f"projection length mismatch: {tuple(s1.shape)} vs {tuple(s2.shape)}"
        )
    return s1 @ s2.transpose(-1, -2)


def sample_gumbel(shape, generator: torch.Generator | None, device=None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, device=device, dtype=dtype)
    return -torch.log(-torch.log(u.clamp_min(_GUMBEL_EPS)) + _GUMBEL_EPS)


def gumbel_select(
    sim: torch.Tensor,
    tau: float | torch.Tensor,
    generator: torch.Generator | None = None,
    sample_noise: bool = True,
) -> SelectionMask:
    """Turn a [.., K, Q] similarity matrix into a SelectionMask.

    With ``sample_noise=True`` a fresh Gumbel(0,1) perturbation is added to
    the logits (training behaviour); otherwise the noise is identically zero
    (deterministic eval behaviour).  Softmax runs over the K axis, so every
    channel column is a distribution over groups.  Argmax ties resolve to the
    lowest group index.
    """
    tau_val = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_val <= 0:
        raise ValueError(f"temperature must be positive, got {tau_val}")
    if sample_noise:
        noise = sample_gumbel(sim.shape, generator, device=sim.device, dtype=sim.dtype)
    else:
        noise = torch.zeros_like(sim)
    logits = (sim + noise) / (tau if torch.is_tensor(tau) else tau_val)
    soft = torch.softmax(logits, dim=-2)
    idx = torch.argmax(logits.detach(), dim=-2)  # first (lowest) index on ties
    hard = torch.zeros_like(soft)
    hard.scatter_(-2, idx.unsqueeze(-2), 1.0)
    # forward value equals `hard` exactly: hard + (soft - soft) in floats
    straight_through = hard + (soft - soft.detach())
    return SelectionMask(hard=hard, soft=soft, straight_through=straight_through, tau=tau_val)


def fixed_partition_mask(groups: int, channels: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Static contiguous-chunk assignment [K, Q]; the non-learned baseline."""
    if groups > channels:
        raise ConfigError(f"groups={groups} exceeds channels={channels}")
    mask = torch.zeros(groups, channels, device=device, dtype=dtype)
    for c in range(channels):
        mask[min(c * groups // channels, groups - 1), c] = 1.0
    return mask


class DynamicSelector(nn.Module):
    """Learned channel-grouping head for one feature family.

    Holds the two 3x3 conv projections (K-channel and Q-channel outputs) and a
    learnable temperature.  ``forward`` returns a SelectionMask per input
    sample; pass a generator for stochastic (training) assignments and none
    for deterministic eval assignments.
    """

    def __init__(self, in_channels: int, groups: int, init_gain: float = 0.5):
        super().__init__()
        if groups < 1:
            raise ConfigError(f"groups: must be >= 1, got {groups}")
        if groups > in_channels:
            raise ConfigError(
                f"groups: {groups} exceeds feature channels {in_channels}"
            )
        self.in_channels = in_channels
        self.groups = groups
        self.proj_k = nn.Conv2d(in_channels, groups, 3, padding=1)
        self.proj_q = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        for conv in (self.proj_k, self.proj_q):
            nn.init.kaiming_normal_(conv.weight, a=1.0)
            conv.weight.data.mul_(init_gain)
            nn.init.zeros_(conv.bias)
        self.raw_tau = nn.Parameter(torch.tensor(1.0))

    @property
    def tau(self) -> torch.Tensor:
        return self.raw_tau.clamp_min(TAU_FLOOR)

    def self_similarity(self, feature: torch.Tensor) -> torch.Tensor:
        """[Q, H, W] -> [K, Q] (or batched) similarity via the two projections."""
        squeeze = feature.dim() == 3
        if squeeze:
            feature = feature.unsqueeze(0)
        if feature.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} channels, got {feature.shape[1]}"
            )
        b = feature.shape[0]
        s1 = self.proj_k(feature).reshape(b, self.groups, -1)
        s2 = self.proj_q(feature).reshape(b, self.in_channels, -1)
        sim = similarity_from_projections(s1, s2)
        return sim.squeeze(0) if squeeze else sim

    def forward(self, feature: torch.Tensor, generator: torch.Generator | None = None,
                sample_noise: bool = False) -> SelectionMask:
        sim = self.self_similarity(feature)
        return gumbel_select(sim, self.tau, generator=generator, sample_noise=sample_noise)

"""Latent-diffusion synthesis with a differential completion head.

The synthesis stage works in the latent space of a small frozen autoencoder.
Training noises two latents with the *same* draw of noise: the complete image
latent z_t and the incomplete (masked composite) latent z_t'.  Because the
noise cancels, z_t - z_t' = sqrt(alpha_bar_t) (z0 - z0') is deterministic, and
a secondary head branching just before the denoiser's output layer learns to
predict it.  Adding that prediction to z_t' yields a second, "completed"
training input, so every step supervises the denoiser on both the real and
the completed latent; at sampling time the same head completes the starting
latent once before a deterministic DDIM rollout.

Timesteps are 1-indexed: t in [1, T] reads alphas_cumprod[t-1].
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoints import load_checkpoint, require_trained, save_checkpoint
from .config import LATENT_FACTOR, RunConfig
from .errors import ConfigError, TrainingDivergedError
from .features import FixedFeatureExtractor
from .synthdata import TryOnDataset, TryOnSample


def rms(x: torch.Tensor) -> torch.Tensor:
    """Mean-reduced L2 norm: sqrt(mean(x^2)).

    A tiny epsilon under the root keeps the gradient finite when the argument
    is exactly zero (sqrt has an infinite slope at 0, which otherwise turns
    into NaN via 0*inf in the chain rule); the value bias is ~5e-13.
    """
    return torch.sqrt(torch.mean(x * x) + 1e-12)


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    timesteps: int
    betas: np.ndarray            # [T] float64
    alphas_cumprod: np.ndarray   # [T] float64

    def validate(self) -> "NoiseSchedule":
        T = self.timesteps
        if self.betas.shape != (T,) or self.alphas_cumprod.shape != (T,):
            raise ConfigError("schedule arrays must have length T")
        if not ((self.betas > 0).all() and (self.betas < 1).all()):
            raise ConfigError("betas must lie in (0, 1)")
        recomputed = np.cumprod(1.0 - self.betas)
        if np.max(np.abs(recomputed - self.alphas_cumprod)) > 1e-12:
            raise ConfigError("alphas_cumprod inconsistent with betas")
        if not (np.diff(self.alphas_cumprod) < 0).all():
            raise ConfigError("alphas_cumprod must be strictly decreasing")
        return self

    def alpha_bar(self, t) -> torch.Tensor:
        """alpha_bar for 1-indexed t (int or LongTensor), as float32 tensor."""
        ab = torch.as_tensor(self.alphas_cumprod, dtype=torch.float32)
        t_idx = torch.as_tensor(t, dtype=torch.long) - 1
        if (t_idx < 0).any() or (t_idx >= self.timesteps).any():
            raise ValueError(f"timestep out of range [1, {self.timesteps}]")
        return ab[t_idx]


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    return NoiseSchedule(timesteps=timesteps, betas=betas,
                         alphas_cumprod=np.cumprod(1.0 - betas)).validate()


def _ab_like(schedule: NoiseSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    ab = schedule.alpha_bar(t).to(ref.dtype)
    if ab.dim() == 0:
        return ab
    return ab.view(-1, *([1] * (ref.dim() - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form noising: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError("noise must match the latent's shape")
    ab = _ab_like(schedule, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# autoencoder and latent codec
# ---------------------------------------------------------------------------

class ImageAutoencoder(nn.Module):
    """4x-downsampling conv autoencoder with bounded [0, 1] output."""

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 64, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 64, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, padding=1), nn.SiLU(),
            nn.Conv2d(32, 3, 3, padding=1), nn.Sigmoid(),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


class LatentCodec:
    """Frozen autoencoder plus per-channel latent normalization.

    The diffusion model sees latents normalized to roughly unit scale; the
    statistics are computed once after autoencoder training and stored in the
    checkpoint.  Parameters are frozen, but decode stays differentiable with
    respect to its *input* so image-space losses can backpropagate into the
    denoiser.
    """

    def __init__(self, ae: ImageAutoencoder, mean, std):
        self.ae = ae
        self.ae.eval()
        for p in self.ae.parameters():
            p.requires_grad_(False)
        self.mean = torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.std = torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1)

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        squeeze = img.dim() == 3
        if squeeze:
            img = img.unsqueeze(0)
        z = (self.ae.encode(img) - self.mean) / self.std
        return z.squeeze(0) if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        img = self.ae.decode(z * self.std + self.mean)
        return img.squeeze(0) if squeeze else img


def train_autoencoder(dataset_dir, config: RunConfig, out_dir, steps: int | None = None,
                      log=print) -> dict:
    """Train the latent autoencoder; returns a summary with held-out PSNR.

    The checkpoint stores the latent normalization statistics.  If held-out
    reconstruction PSNR lands below 28 dB the summary (and the on-disk
    report) marks the run as failed rather than silently continuing.
    """
    from .metrics import psnr as psnr_metric

    cfg = config
    steps = steps or cfg.ae_steps
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds = TryOnDataset(dataset_dir, "train")
    test_ds = TryOnDataset(dataset_dir, "test")

    torch.manual_seed(cfg.seed + 10)
    ae = ImageAutoencoder(cfg.latent_channels)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 11)

    def pick_images(idx):
        imgs = []
        for i in idx:
            s = train_ds[int(i) % len(train_ds)]
            imgs.append((s.person, s.agnostic_composite, s.gt_warped_garment)[int(i) % 3])
        return torch.from_numpy(np.stack(imgs))

    t0 = time.time()
    for step in range(1, steps + 1):
        idx = torch.randint(3 * len(train_ds), (cfg.ae_batch,), generator=gen)
        batch = pick_images(idx.tolist())
        recon = ae(batch)
        loss = F.mse_loss(recon, batch)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite autoencoder loss at step {step}",
                                        diagnostics={"step": step, "batch_indices": idx.tolist()})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0 or step == steps:
            log(f"[ae] step {step}/{steps} mse={loss.item():.6f}")

    # latent statistics over a slice of the training distribution
    ae.eval()
    with torch.no_grad():
        zs = []
        for i in range(min(128, len(train_ds))):
            s = train_ds[i]
            for img in (s.person, s.agnostic_composite):
                zs.append(ae.encode(torch.from_numpy(img).unsqueeze(0)))
        zcat = torch.cat(zs)
        mean = zcat.mean(dim=(0, 2, 3))
        std = zcat.std(dim=(0, 2, 3)).clamp_min(1e-6)

        psnrs = []
        for i in range(min(64, len(test_ds))):
            img = torch.from_numpy(test_ds[i].person).unsqueeze(0)
            rec = ae(img)
            psnrs.append(psnr_metric(img.squeeze(0).numpy(), rec.squeeze(0).numpy()))
        held_out_psnr = float(np.mean([p for p in psnrs if math.isfinite(p)]))

    extra = {"latent_mean": mean.tolist(), "latent_std": std.tolist(),
             "held_out_psnr": held_out_psnr}
    save_checkpoint(out_dir / "ae.ckpt", "autoencoder", ae, cfg.to_dict(),
                    trained_steps=steps, extra=extra)
    summary = {"steps": steps, "held_out_psnr": held_out_psnr,
               "passed": held_out_psnr >= 28.0, "seconds": time.time() - t0,
               "checkpoint": str(out_dir / "ae.ckpt")}
    (out_dir / "ae_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_codec(ae_ckpt_path) -> tuple[LatentCodec, dict]:
    state, meta = load_checkpoint(ae_ckpt_path, kind="autoencoder")
    ae = ImageAutoencoder(int(meta["config"].get("latent_channels", 4)))
    ae.load_state_dict(state)
    codec = LatentCodec(ae, meta["extra"]["latent_mean"], meta["extra"]["latent_std"])
    return codec, meta


# ---------------------------------------------------------------------------
# conditional denoiser with differential head
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb)).unsqueeze(-1).unsqueeze(-1)
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class CrossAttention(nn.Module):
    """Spatial queries attending over a few tokens derived from the garment embedding."""

    def __init__(self, channels: int, q_dim: int, n_tokens: int = 4, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.n_tokens = n_tokens
        self.scale = (channels // heads) ** -0.5
        self.to_tokens = nn.Linear(q_dim, n_tokens * channels)
        self.norm = nn.GroupNorm(8, channels)
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, qvec: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.to_tokens(qvec).view(b, self.n_tokens, c)
        xs = self.norm(x).flatten(2).transpose(1, 2)            # [B, HW, C]
        q = self.q_proj(xs).view(b, -1, self.heads, c // self.heads).transpose(1, 2)
        k = self.k_proj(tokens).view(b, -1, self.heads, c // self.heads).transpose(1, 2)
        v = self.v_proj(tokens).view(b, -1, self.heads, c // self.heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        out = self.out_proj(out).transpose(1, 2).view(b, c, h, w)
        return x + out


class GarmentEncoder(nn.Module):
    """Global garment embedding: small conv net, pooled, projected, unit-norm."""

    def __init__(self, d_q: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(64, d_q)

    def forward(self, garment: torch.Tensor) -> torch.Tensor:
        if garment.dim() == 3:
            garment = garment.unsqueeze(0)
        h = self.net(garment).mean(dim=(2, 3))
        q = self.proj(h)
        return F.normalize(q, dim=-1)


class UNetDenoiser(nn.Module):
    """Conditional U-Net over [z_in, z_w, M] with two zero-init output heads.

    The main head predicts the noise; the differential head branches from the
    same penultimate features — just before the output layer — and predicts
    the complete-minus-incomplete latent difference.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cz = cfg.latent_channels
        w1, w2, w3 = cfg.unet_widths
        temb_dim = 256
        self.time_mlp = nn.Sequential(
            nn.Linear(128, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.garment_encoder = GarmentEncoder(cfg.d_q)

        self.in_conv = nn.Conv2d(2 * cz + 1, w1, 3, padding=1)
        self.rb_d1 = ResBlock(w1, temb_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.rb_d2 = ResBlock(w2, temb_dim)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.rb_d3 = ResBlock(w3, temb_dim)
        self.attn = CrossAttention(w3, cfg.d_q)
        self.rb_mid = ResBlock(w3, temb_dim)
        self.up2 = nn.Conv2d(w3, w2, 3, padding=1)
        self.merge2 = nn.Conv2d(2 * w2, w2, 3, padding=1)
        self.rb_u2 = ResBlock(w2, temb_dim)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.merge1 = nn.Conv2d(2 * w1, w1, 3, padding=1)
        self.rb_u1 = ResBlock(w1, temb_dim)
        self.out_norm = nn.GroupNorm(8, w1)
        self.eps_head = nn.Conv2d(w1, cz, 3, padding=1)
        self.dif_head = nn.Conv2d(w1, cz, 3, padding=1)
        for head in (self.eps_head, self.dif_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def embed_garment(self, garment: torch.Tensor) -> torch.Tensor:
        return self.garment_encoder(garment)

    def denoise_predict(self, z_in: torch.Tensor, z_w: torch.Tensor,
                        mask: torch.Tensor, q: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Noise and differential predictions for a (possibly batched) latent.

        ``q`` is either the [B, d_q] garment embedding or a raw [B, 3, H, W]
        garment image (embedded on the fly); ``t`` is a 1-indexed int or
        LongTensor [B].
        """
        squeeze = z_in.dim() == 3
        if squeeze:
            z_in, z_w, mask = (u.unsqueeze(0) for u in (z_in, z_w, mask))
        if z_in.shape != z_w.shape:
            raise ValueError("z_in and z_w shapes differ")
        if mask.shape[-2:] != z_in.shape[-2:]:
            raise ValueError("mask resolution must match the latent")
        if q.dim() >= 3:
            q = self.embed_garment(q)
        b = z_in.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(b)
        temb = self.time_mlp(timestep_embedding(t, 128))

        x = self.in_conv(torch.cat([z_in, z_w, mask.expand(b, -1, -1, -1)], dim=1))
        h1 = self.rb_d1(x, temb)
        h2 = self.rb_d2(self.down1(h1), temb)
        x = self.rb_d3(self.down2(h2), temb)
        x = self.attn(x, q)
        x = self.rb_mid(x, temb)
        x = self.up2(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.rb_u2(self.merge2(torch.cat([x, h2], dim=1)), temb)
        x = self.up1(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.rb_u1(self.merge1(torch.cat([x, h1], dim=1)), temb)
        feats = F.silu(self.out_norm(x))
        eps_hat = self.eps_head(feats)
        delta_hat = self.dif_head(feats)
        if squeeze:
            return eps_hat.squeeze(0), delta_hat.squeeze(0)
        return eps_hat, delta_hat

    forward = denoise_predict


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

@dataclass
class SynLossReport:
    l_rec: torch.Tensor
    l_dif: torch.Tensor
    l_mae_img: torch.Tensor
    l_prec_img: torch.Tensor
    total: torch.Tensor
    gammas: dict = field(default_factory=dict)

    def to_floats(self) -> dict:
        return {"l_rec": float(self.l_rec.detach()), "l_dif": float(self.l_dif.detach()),
                "l_mae_img": float(self.l_mae_img.detach()),
                "l_prec_img": float(self.l_prec_img.detach()),
                "total": float(self.total.detach()), **self.gammas}


def ditp_loss(delta_hat: torch.Tensor, z_t: torch.Tensor, z_t_prime: torch.Tensor) -> torch.Tensor:
    """Completion objective: mean-reduced L2 of (delta_hat + z_t') - z_t."""
    if delta_hat.shape != z_t.shape or z_t.shape != z_t_prime.shape:
        raise ValueError("ditp_loss arguments must share one shape")
    return rms((delta_hat + z_t_prime) - z_t)


def compute_syn_losses(z0, z_w, t, eps, person, denoise_fn, decode_fn,
                       schedule: NoiseSchedule, extractor, cfg: RunConfig,
                       use_ditp: bool) -> SynLossReport:
    """All synthesis loss terms for one batch of paired latents.

    ``denoise_fn(z_in, t) -> (eps_hat, delta_hat)`` must close over the
    conditioning; ``decode_fn`` maps latents to images.  With ``use_ditp``
    the denoiser runs on z_t and on the detached completed latent and the
    reconstruction term averages the two passes; otherwise only z_t is used
    and the differential term is zero.
    """
    z_t = forward_diffuse(z0, t, eps, schedule)
    z_t_prime = forward_diffuse(z_w, t, eps, schedule)

    if use_ditp:
        _, delta_hat = denoise_fn(z_t_prime, t)
        l_dif = ditp_loss(delta_hat, z_t, z_t_prime)
        completed = (delta_hat.detach() if cfg.detach_differential else delta_hat) + z_t_prime
        eps1, _ = denoise_fn(z_t, t)
        eps2, _ = denoise_fn(completed, t)
        l_rec = 0.5 * (rms(eps - eps1) + rms(eps - eps2))
    else:
        eps1, _ = denoise_fn(z_t, t)
        l_rec = rms(eps - eps1)
        l_dif = z0.new_zeros(())

    ab = _ab_like(schedule, t, z0)
    z0_hat = (z_t - torch.sqrt(1.0 - ab) * eps1) / torch.sqrt(ab)
    img_hat = decode_fn(z0_hat)
    l_mae_img = F.l1_loss(img_hat, person)
    l_prec_img = img_hat.new_zeros(())
    for fo, ft in zip(extractor.features(img_hat), extractor.features(person)):
        l_prec_img = l_prec_img + F.l1_loss(fo, ft)

    total = (l_rec + cfg.gamma_dif * l_dif + cfg.gamma_mae * l_mae_img
             + cfg.gamma_prec * l_prec_img)
    return SynLossReport(
        l_rec=l_rec, l_dif=l_dif, l_mae_img=l_mae_img, l_prec_img=l_prec_img,
        total=total,
        gammas={"gamma_dif": cfg.gamma_dif, "gamma_mae": cfg.gamma_mae,
                "gamma_prec": cfg.gamma_prec},
    )


def downsample_mask(mask: torch.Tensor) -> torch.Tensor:
    """Image-resolution inpaint mask -> latent resolution (any overlap counts)."""
    if mask.dim() == 3:
        return F.max_pool2d(mask.unsqueeze(0), LATENT_FACTOR).squeeze(0)
    return F.max_pool2d(mask, LATENT_FACTOR)


def garment_region(sample: TryOnSample) -> np.ndarray:
    """Binary [1,H,W] region where the warped garment covers the person.

    Exact by construction: inside the region the person image *is* the warped
    garment, so exact float equality across all channels recovers it.
    """
    eq = np.abs(sample.person - sample.gt_warped_garment).max(axis=0) == 0.0
    return eq[None].astype(np.float32)


def syn_train_step(batch: dict, model: UNetDenoiser, codec: LatentCodec,
                   schedule: NoiseSchedule, cfg: RunConfig, optimizer,
                   generator: torch.Generator, extractor,
                   use_ditp: bool) -> SynLossReport:
    """One optimization step on a batch of image tensors.

    ``batch`` holds float tensors person/agnostic/mask/garment.  A fraction of
    samples (cfg.empty_mask_prob) is rewritten as the no-inpainting case —
    mask cleared, incomplete image replaced by the complete one — which is
    what teaches the differential head to stay quiet when nothing is missing.
    """
    person = batch["person"]
    agnostic = batch["agnostic"].clone()
    mask = batch["mask"].clone()
    b = person.shape[0]

    blank = torch.rand(b, generator=generator) < cfg.empty_mask_prob
    if blank.any():
        agnostic[blank] = person[blank]
        mask[blank] = 0.0

    with torch.no_grad():
        z0 = codec.encode(person)
        z_w = codec.encode(agnostic)
    mask_l = downsample_mask(mask)
    q = model.embed_garment(batch["garment"])
    t = torch.randint(1, schedule.timesteps + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)

    def denoise_fn(z_in, t_in):
        return model.denoise_predict(z_in, z_w, mask_l, q, t_in)

    report = compute_syn_losses(z0, z_w, t, eps, person, denoise_fn,
                                codec.decode, schedule, extractor, cfg, use_ditp)
    if not torch.isfinite(report.total):
        raise TrainingDivergedError(
            "non-finite synthesis loss",
            diagnostics={"losses": report.to_floats(), "t": t.tolist()},
        )
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    return report


def train_diffusion(dataset_dir, config: RunConfig, out_dir, ae_ckpt,
                    use_ditp: bool | None = None, steps: int | None = None,
                    warp_ckpt=None, log=print) -> dict:
    """Train the conditional denoiser on top of a frozen autoencoder."""
    cfg = config
    steps = steps or cfg.diff_steps
    use_ditp = cfg.use_ditp if use_ditp is None else use_ditp
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds = TryOnDataset(dataset_dir, "train")
    codec, _ = load_codec(ae_ckpt)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    extractor = FixedFeatureExtractor(cfg.feature_extractor_seed)

    warp_model = None
    if cfg.composite_source == "deformnet":
        if warp_ckpt is None:
            raise ConfigError("composite_source: 'deformnet' requires a warp checkpoint")
        from .deformnet import load_warp_model
        warp_model, _ = load_warp_model(warp_ckpt)

    torch.manual_seed(cfg.seed + 20)
    model = UNetDenoiser(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.diff_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 21)

    config_echo = dict(cfg.to_dict(), use_ditp=use_ditp, diff_steps=steps)
    log_path = out_dir / "train_diffusion.jsonl"
    t0 = time.time()
    with open(log_path, "w") as log_file:
        for step in range(1, steps + 1):
            idx = torch.randint(len(train_ds), (cfg.diff_batch,), generator=gen)
            samples = [train_ds[int(i)] for i in idx.tolist()]
            batch = {
                "person": torch.from_numpy(np.stack([s.person for s in samples])),
                "mask": torch.from_numpy(np.stack([s.inpaint_mask for s in samples])),
                "garment": torch.from_numpy(np.stack([s.garment for s in samples])),
            }
            if warp_model is None:
                batch["agnostic"] = torch.from_numpy(
                    np.stack([s.agnostic_composite for s in samples])
                )
            else:
                batch["agnostic"] = _deformnet_composites(warp_model, samples)
            report = syn_train_step(batch, model, codec, schedule, cfg, opt, gen,
                                    extractor, use_ditp)
            if step % cfg.log_every == 0 or step == steps:
                entry = dict(report.to_floats(), step=step)
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if step % cfg.val_every == 0 or step == steps:
                vals = report.to_floats()
                log(f"[diffusion ditp={use_ditp}] step {step}/{steps} "
                    f"l_rec={vals['l_rec']:.4f} l_dif={vals['l_dif']:.4f}")
                save_checkpoint(out_dir / "diffusion.ckpt", "diffusion", model,
                                config_echo, trained_steps=step)

    save_checkpoint(out_dir / "diffusion.ckpt", "diffusion", model, config_echo,
                    trained_steps=steps)
    summary = {"steps": steps, "use_ditp": use_ditp, "seconds": time.time() - t0,
               "checkpoint": str(out_dir / "diffusion.ckpt"), "log": str(log_path)}
    (out_dir / "diffusion_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


@torch.no_grad()
def _deformnet_composites(warp_model, samples) -> torch.Tensor:
    """Rebuild incomplete composites using predicted (not ground-truth) warps."""
    garment = torch.from_numpy(np.stack([s.garment for s in samples]))
    condition = torch.from_numpy(np.stack([s.condition for s in samples]))
    pred = warp_model(garment, condition)["outputs"][0]
    out = []
    for k, s in enumerate(samples):
        region = torch.from_numpy(garment_region(s))
        mask = torch.from_numpy(s.inpaint_mask)
        person = torch.from_numpy(s.person)
        ring = mask * (1.0 - region)
        out.append(person * (1 - mask) + pred[k] * region + 0.5 * ring)
    return torch.stack(out)


def load_denoiser(diff_ckpt, require_training: bool = True) -> tuple[UNetDenoiser, dict]:
    state, meta = load_checkpoint(diff_ckpt, kind="diffusion")
    if require_training:
        require_trained(meta, diff_ckpt)
    cfg = RunConfig.from_dict({k: v for k, v in meta["config"].items()
                               if k in RunConfig.__dataclass_fields__})
    model = UNetDenoiser(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Uniformly spaced 1-indexed timesteps from T down to 1, inclusive."""
    ts = np.unique(np.linspace(1, timesteps, steps).round().astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def ddim_loop(z: torch.Tensor, denoise_fn, schedule: NoiseSchedule, steps: int,
              blend_fn=None, per_step_completion: bool = False) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM rollout from t = T down to 0.

    ``denoise_fn(z, t) -> (eps_hat, delta_hat)``.  ``blend_fn(z, t)``, when
    given, re-imposes known content after each update (t = 0 for the final
    clean estimate).  Returns the final z0 estimate.
    """
    ts = ddim_timesteps(schedule.timesteps, steps)
    for i, t_now in enumerate(ts):
        if per_step_completion and i > 0:
            _, delta = denoise_fn(z, t_now)
            z = z + delta
        eps_hat, _ = denoise_fn(z, t_now)
        ab_now = _ab_like(schedule, t_now, z)
        z0_hat = (z - torch.sqrt(1.0 - ab_now) * eps_hat) / torch.sqrt(ab_now)
        if i + 1 < len(ts):
            t_next = ts[i + 1]
            ab_next = _ab_like(schedule, t_next, z)
            z = torch.sqrt(ab_next) * z0_hat + torch.sqrt(1.0 - ab_next) * eps_hat
            if blend_fn is not None:
                z = blend_fn(z, t_next)
        else:
            z = z0_hat
            if blend_fn is not None:
                z = blend_fn(z, 0)
    return z


@torch.no_grad()
def sample_tryon(agnostic: torch.Tensor, garment: torch.Tensor, mask: torch.Tensor,
                 codec: LatentCodec, model: UNetDenoiser, schedule: NoiseSchedule,
                 steps: int, seed: int, latent_blend: bool = True,
                 per_step_ditp: bool = False) -> torch.Tensor:
    """Generate a try-on image from the incomplete composite.

    The starting latent is the incomplete latent noised to t = T with
    seed-determined Gaussian noise; the differential head completes it once
    before the DDIM rollout.  With ``latent_blend`` the preserve region
    (latent cells untouched by the inpaint mask) is re-imposed from the
    incomplete latent after every update.  Deterministic given the seed.
    """
    model.eval()
    squeeze = agnostic.dim() == 3
    if squeeze:
        agnostic, garment, mask = (u.unsqueeze(0) for u in (agnostic, garment, mask))
    gen = torch.Generator().manual_seed(seed)
    z_w = codec.encode(agnostic)
    mask_l = downsample_mask(mask)
    q = model.embed_garment(garment)
    eps = torch.randn(z_w.shape, generator=gen)
    T = schedule.timesteps

    def denoise_fn(z_in, t_in):
        return model.denoise_predict(z_in, z_w, mask_l, q, t_in)

    def blend_fn(z_in, t_next):
        if t_next == 0:
            known = z_w
        else:
            known = forward_diffuse(z_w, t_next, eps, schedule)
        return mask_l * z_in + (1.0 - mask_l) * known

    z = forward_diffuse(z_w, T, eps, schedule)   # incomplete latent at t = T
    _, delta = denoise_fn(z, T)
    z = z + delta                                 # one-time completion
    z_final = ddim_loop(z, denoise_fn, schedule, steps,
                        blend_fn=blend_fn if latent_blend else None,
                        per_step_completion=per_step_ditp)
    img = codec.decode(z_final).clamp(0.0, 1.0)
    return img.squeeze(0) if squeeze else img


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

@torch.no_grad()
def completed_latent_error(model: UNetDenoiser | None, codec: LatentCodec,
                           dataset: TryOnDataset, n_samples: int,
                           t_values: list[int], schedule: NoiseSchedule,
                           seed: int = 0) -> float:
    """Mean RMS error of the completed latent vs the true complete latent.

    With ``model=None`` the differential prediction is zero, i.e. the
    untrained-mapper baseline ||z_t - z_t'||.
    """
    gen = torch.Generator().manual_seed(seed)
    n = min(n_samples, len(dataset))
    samples = [dataset[i] for i in range(n)]
    person = torch.from_numpy(np.stack([s.person for s in samples]))
    agnostic = torch.from_numpy(np.stack([s.agnostic_composite for s in samples]))
    mask = torch.from_numpy(np.stack([s.inpaint_mask for s in samples]))
    garment = torch.from_numpy(np.stack([s.garment for s in samples]))
    z0 = codec.encode(person)
    z_w = codec.encode(agnostic)
    mask_l = downsample_mask(mask)
    q = model.embed_garment(garment) if model is not None else None

    errs = []
    for t in t_values:
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_diffuse(z0, t, eps, schedule)
        z_t_p = forward_diffuse(z_w, t, eps, schedule)
        if model is None:
            delta = torch.zeros_like(z_t)
        else:
            _, delta = model.denoise_predict(z_t_p, z_w, mask_l, q, t)
        errs.append(float(rms((delta + z_t_p) - z_t)))
    return float(np.mean(errs))

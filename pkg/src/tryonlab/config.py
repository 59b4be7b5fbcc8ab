"""Run configuration: one flat dataclass, JSON on disk, strict validation.

Every tunable the pipeline exposes lives here so that a single JSON file (or
the built-in defaults) fully determines a run.  Unknown keys in a config file
are rejected rather than ignored; silent typos in experiment configs are how
ablations go wrong.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

#: Environment variable consulted for a config path when --config is not given.
CONFIG_ENV_VAR = "D4_CONFIG"

#: Spatial compression factor of the latent autoencoder.
LATENT_FACTOR = 4


@dataclass
class RunConfig:
    # --- data ---
    resolution: tuple[int, int] = (64, 48)  # (H, W)
    n_train: int = 2000
    n_test: int = 200
    seed: int = 0

    # --- warping network ---
    pyramid_levels: int = 3
    groups: int = 8
    grouping: str = "dsdm"  # one of: dsdm, fixed, vanilla
    encoder_widths: tuple[int, ...] = (32, 64, 96)
    phi_width: int = 16
    estimator_stem_width: int = 48
    group_width: int = 12        # per-group estimator width (dsdm / fixed)
    vanilla_width: int = 32      # estimator width when grouping == "vanilla"
    lambda_style: float = 100.0
    warp_lr: float = 2e-4
    warp_batch: int = 8
    warp_steps: int = 5000

    # --- latent autoencoder ---
    latent_channels: int = 4
    ae_lr: float = 1e-3
    ae_batch: int = 8
    ae_steps: int = 1500

    # --- diffusion ---
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 50
    d_q: int = 128
    unet_widths: tuple[int, ...] = (64, 128, 128)
    diff_lr: float = 2e-4
    diff_batch: int = 8
    diff_steps: int = 3000
    gamma_dif: float = 1.0
    gamma_mae: float = 1.0
    gamma_prec: float = 1.0
    use_ditp: bool = True
    detach_differential: bool = True
    empty_mask_prob: float = 0.1
    composite_source: str = "ground_truth"  # or "deformnet"

    # --- shared ---
    feature_extractor_seed: int = 1234
    log_every: int = 50
    val_every: int = 500
    val_samples: int = 64

    # ------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        H, W = self.resolution
        div = max(2**self.pyramid_levels, LATENT_FACTOR * 4)
        if H % div or W % div or H <= 0 or W <= 0:
            raise ConfigError(
                f"resolution: ({H}, {W}) must be positive and divisible by {div} "
                f"(2^pyramid_levels and 4x the latent downsampling)"
            )
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels: must be >= 1")
        if len(self.encoder_widths) != self.pyramid_levels:
            raise ConfigError(
                f"encoder_widths: expected {self.pyramid_levels} entries, "
                f"got {len(self.encoder_widths)}"
            )
        if self.grouping not in ("dsdm", "fixed", "vanilla"):
            raise ConfigError(f"grouping: unknown mode {self.grouping!r}")
        if self.groups < 1:
            raise ConfigError("groups: must be >= 1")
        if self.groups > min(min(self.encoder_widths), self.phi_width):
            raise ConfigError(
                f"groups: {self.groups} exceeds the narrowest feature width "
                f"{min(min(self.encoder_widths), self.phi_width)}"
            )
        if self.grouping != "vanilla" and self.estimator_stem_width % self.groups:
            raise ConfigError(
                f"estimator_stem_width: {self.estimator_stem_width} must be divisible "
                f"by groups={self.groups}"
            )
        for name in ("n_train", "n_test", "warp_steps", "ae_steps", "diff_steps",
                     "warp_batch", "ae_batch", "diff_batch", "timesteps", "ddim_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.ddim_steps > self.timesteps:
            raise ConfigError("ddim_steps: cannot exceed timesteps")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError("beta_start/beta_end: need 0 < beta_start < beta_end < 1")
        if not (0.0 <= self.empty_mask_prob <= 1.0):
            raise ConfigError("empty_mask_prob: must be in [0, 1]")
        if self.composite_source not in ("ground_truth", "deformnet"):
            raise ConfigError(f"composite_source: unknown source {self.composite_source!r}")
        if self.lambda_style < 0:
            raise ConfigError("lambda_style: must be >= 0")
        return self

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["encoder_widths"] = list(self.encoder_widths)
        d["unet_widths"] = list(self.unet_widths)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        for key in ("resolution", "encoder_widths", "unet_widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:  # e.g. wrong structure
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must contain a JSON object")
        return cls.from_dict(data)


def load_config(path: str | None = None) -> RunConfig:
    """Resolve a config: explicit path > $D4_CONFIG > built-in defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return RunConfig().validate()
    return RunConfig.from_file(path)

"""Versioned checkpoint container shared by all trained networks.

A checkpoint is a deterministic zip holding one float32 ``.npy`` per named
parameter/buffer under ``params/`` plus a ``meta.json`` with the format
version, checkpoint kind, a config echo, optimizer-agnostic run metadata
(trained steps, captured RNG state) and any extra scalars a stage needs
(e.g. latent normalization statistics).  Saving the same state twice yields
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .diskio import read_array_zip, write_array_zip
from .errors import MissingArtifactError

CHECKPOINT_FORMAT_VERSION = 1
KNOWN_KINDS = ("warp", "autoencoder", "diffusion")


def save_checkpoint(path: str | Path, kind: str, module: torch.nn.Module,
                    config_echo: dict, trained_steps: int,
                    extra: dict | None = None) -> None:
    if kind not in KNOWN_KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    state = module.state_dict()
    arrays = {f"params/{name}": tensor.detach().cpu().numpy() for name, tensor in state.items()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": config_echo,
        "trained_steps": int(trained_steps),
        "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        "param_names": sorted(state.keys()),
        "extra": extra or {},
    }
    write_array_zip(path, arrays, meta=meta)


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict]:
    """Return (state_dict of tensors, meta).  Validates format and kind."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    arrays, meta = read_array_zip(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise MissingArtifactError(
            f"checkpoint {path} has format_version={meta.get('format_version')!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    if kind is not None and meta.get("kind") != kind:
        raise MissingArtifactError(
            f"checkpoint {path} is of kind {meta.get('kind')!r}, expected {kind!r}"
        )
    state = {}
    for name, arr in arrays.items():
        if name.startswith("params/"):
            state[name[len("params/"):]] = torch.from_numpy(np.ascontiguousarray(arr))
    return state, meta


def require_trained(meta: dict, path: str | Path) -> None:
    """Refuse checkpoints that were saved before any optimization happened."""
    if int(meta.get("trained_steps", 0)) < 1:
        raise MissingArtifactError(
            f"checkpoint {path} has trained_steps=0; train the model before using it"
        )

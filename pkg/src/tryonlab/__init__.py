"""Grouped appearance-flow garment warping and differential-diffusion try-on,
trained end-to-end on a procedurally generated paired dataset."""

__version__ = "0.1.0"

from .config import LATENT_FACTOR, RunConfig, load_config
from .errors import ConfigError, MissingArtifactError, TrainingDivergedError

__all__ = [
    "LATENT_FACTOR",
    "RunConfig",
    "load_config",
    "ConfigError",
    "MissingArtifactError",
    "TrainingDivergedError",
    "__version__",
]

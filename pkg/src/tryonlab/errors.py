"""Error taxonomy shared across the package.

The CLI maps these onto stable exit codes:
ConfigError -> 2, OSError -> 3, MissingArtifactError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or contract-violating arguments derived from config."""


class MissingArtifactError(FileNotFoundError):
    """A required input artifact (dataset, checkpoint, ...) is absent or unusable."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

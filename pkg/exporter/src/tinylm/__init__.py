"""Tiny character-level transformer trainer and checkpoint exporter."""

__version__ = "0.1.0"


class TrainingError(Exception):
    """Training diverged or was misconfigured."""


class ExportError(Exception):
    """The trained model cannot be serialized to the container schema."""

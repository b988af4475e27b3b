"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class VidAdaptError(Exception):
    """Base class for all errors raised by vidadapt."""

    exit_code: int = 1


class ConfigError(VidAdaptError):
    """Invalid configuration key or value."""

    exit_code = 1


class DatasetError(VidAdaptError):
    """Missing or corrupt dataset files."""

    exit_code = 2


class ShapeError(VidAdaptError):
    """Array shapes or channel counts do not line up."""

    exit_code = 2


class FlowError(VidAdaptError):
    """Flow field with the wrong direction tag or unusable frames."""

    exit_code = 2


class CheckpointError(VidAdaptError):
    """Checkpoint version mismatch or corrupt container."""

    exit_code = 2


class NumericalError(VidAdaptError):
    """Non-finite activation or loss.

    Attributes:
        where (str):
            Name of the layer or loss term that produced the bad value.
    """

    exit_code = 3

    def __init__(self, where: str, message: str | None = None) -> None:
        self.where = where
        super().__init__(message or f"non-finite value in {where}")


class EvaluationError(VidAdaptError):
    """Metric undefined on the given data (no valid pixels, no class present)."""

    exit_code = 2

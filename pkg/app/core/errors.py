"""Exception hierarchy shared by the library, the CLI and the HTTP API."""
from typing import Optional


class PatLabError(Exception):
    """Base class for every error raised by the lab."""

    exit_code = 2


class ConfigError(PatLabError, ValueError):
    """Invalid or unknown configuration."""

    exit_code = 1


class ShapeError(PatLabError, ValueError):
    """Array dimensions do not agree."""


class TrainingError(PatLabError, ArithmeticError):
    """Non-finite loss or gradient during optimisation."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class GenerationError(PatLabError):
    """Synthetic scene could not be rendered under the given constraints."""


class ModelError(PatLabError):
    """Invalid causal model, predictor or checkpoint combination."""


class UndefinedMetricError(PatLabError):
    """Metric undefined for the given labels (e.g. AP without positives)."""


class FormatError(PatLabError):
    """Unreadable file: bad magic, unknown version or missing columns."""

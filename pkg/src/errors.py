"""Exception hierarchy for the CSI localizer."""

from typing import Optional


class LocalizerError(Exception):
    """Base class for all localizer failures."""

    exit_code = 1


class ConfigurationError(LocalizerError, ValueError):
    """Invalid hyperparameter, plan or configuration value."""

    exit_code = 2


class OutputExistsError(ConfigurationError):
    """A stage would overwrite a non-empty output without the force flag."""

    def __init__(self, path: str):
        super().__init__(f"Refusing to overwrite existing output {path} (use --force)")
        self.path = path


class RejectedInputError(LocalizerError, ValueError):
    """Input with the wrong shape, length, profile or range."""

    exit_code = 3


class CorruptFileError(LocalizerError):
    """A file whose magic, version or layout does not match its format."""

    exit_code = 3

    def __init__(self, path: str, field: str, detail: str = ""):
        message = f"{path}: bad {field}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.path = path
        self.field = field


class UsageError(LocalizerError, RuntimeError):
    """An API called out of order, e.g. backward before forward."""


class NumericError(LocalizerError, ArithmeticError):
    """NaN or Inf appeared in parameters, moments or activations."""

    exit_code = 4

    def __init__(self, what: str, step: Optional[int] = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite values in {what}{where}")
        self.what = what
        self.step = step

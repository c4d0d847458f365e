"""Exception hierarchy.

Numerical failures map to CLI exit code 3, configuration problems to 2.
"""

from __future__ import annotations


class StabShiftError(Exception):
    """Base class for all package errors."""


class ConfigError(StabShiftError, ValueError):
    """Invalid configuration, unknown key, or unsupported option."""


class NumericalError(StabShiftError, ArithmeticError):
    """Base class for failures of a numerical procedure."""


class DivergenceError(NumericalError):
    """A state or hidden vector became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConstraintDriftError(NumericalError):
    """The pendulum rod constraint could not be held within tolerance."""

    def __init__(self, message: str, step: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class GradientOverflowError(NumericalError):
    """Non-finite intermediate encountered while computing gradients."""

    def __init__(self, tensor: str):
        super().__init__(f"non-finite values in {tensor!r}")
        self.tensor = tensor


class TrainingFailure(NumericalError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, detail: str = ""):
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.epoch = epoch


class InvalidWindowError(StabShiftError, ValueError):
    pass


class MissingFieldError(StabShiftError, ValueError):
    pass


class UnsupportedSettingError(ConfigError):
    pass


class InvalidCorrelationError(StabShiftError, ValueError):
    pass


class InfeasibleRatioError(StabShiftError, RuntimeError):
    pass


class DegenerateLabelsError(StabShiftError, ValueError):
    pass


class UnsupportedDimensionError(StabShiftError, ValueError):
    pass


class ParseError(StabShiftError, ValueError):
    """Malformed input file; carries the offending 1-based row number when known."""

    def __init__(self, message: str, path: str | None = None, row: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if row is not None:
            where += f":{row}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.row = row

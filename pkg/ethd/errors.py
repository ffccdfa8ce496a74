"""Exception and warning types shared by every ethd module."""

from typing import Any, Dict, Optional


class EthdError(Exception):
    """Base class for all toolkit errors"""


class DomainError(EthdError, ValueError):
    """Argument outside the domain of an operation"""


class NumericError(EthdError, ArithmeticError):
    """Simulation or computation produced a non-finite value"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        if not self.diagnostics:
            return super().__str__()
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{super().__str__()} ({details})"


class MeasurementSaturatedError(EthdError):
    """Displacement too small for the encoder to resolve"""


class FitError(EthdError):
    """Least-squares fit could not be computed"""


class CropError(EthdError, ValueError):
    """Signal shorter than the requested crop window"""


class ProtocolError(EthdError, ValueError):
    """Experimental protocol violated (stimulus order, tap schedule, ...)"""


class StaircaseStateError(EthdError):
    """Staircase used after it terminated"""


class NonConvergenceError(EthdError):
    """Staircase hit max_trials before collecting enough reversals"""

    def __init__(self, message: str, state: Any = None):
        super().__init__(message)
        self.state = state


class DegenerateDataError(EthdError, ValueError):
    """Statistic undefined for the given data (0/0)"""


class PrecisionError(EthdError, ValueError):
    """Requested Monte-Carlo resolution too coarse"""


class ConfigError(EthdError, ValueError):
    """Invalid or unknown configuration value"""


class ArtifactIOError(EthdError, OSError):
    """Output artifact could not be written"""


class ExtrapolationWarning(UserWarning):
    """Value used outside the range it was calibrated for"""


class ProtocolDeviationWarning(UserWarning):
    """Run departs from the standard protocol but is still accepted"""

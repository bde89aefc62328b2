"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code so that scripted pipelines can
tell a malformed input apart from an unidentifiable calibration problem.
"""

from __future__ import annotations


class WheelcalError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class SchemaError(WheelcalError):
    """Malformed configuration or input file."""

    exit_code = 2


class ObservabilityError(WheelcalError):
    """The motion set does not excite some parameters.

    Parameters
    ----------
    kind : str
        Short tag such as ``"rotation-deficient"``.
    parameters : tuple of str
        Names of the parameters that cannot be identified.
    detail : str, optional
        Free-form explanation appended to the message.
    """

    exit_code = 3

    def __init__(self, kind: str, parameters: tuple[str, ...] = (), detail: str = ""):
        self.kind = kind
        self.parameters = tuple(parameters)
        msg = kind
        if parameters:
            msg += ": unobservable parameters " + ", ".join(parameters)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConvergenceError(WheelcalError):
    """An iterative method failed or violated a monotonicity guarantee."""

    exit_code = 4


class ConditioningError(WheelcalError):
    """Singular or ill-conditioned linear algebra.

    Parameters
    ----------
    message : str
        Description of the failure.
    parameters : tuple of str
        Parameters spanning the (near) null direction, if known.
    """

    exit_code = 5

    def __init__(self, message: str, parameters: tuple[str, ...] = ()):
        self.parameters = tuple(parameters)
        if parameters:
            message += " (null direction: " + ", ".join(parameters) + ")"
        super().__init__(message)


class NumericalFailure(ConditioningError):
    """A numerical routine produced no admissible answer."""


class MatchFailure(WheelcalError):
    """Scan matching did not reach an acceptable alignment."""

    exit_code = 4


class ObservabilityWarning(UserWarning):
    """A parameter is weakly excited but calibration can proceed."""

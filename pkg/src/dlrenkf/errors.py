"""Exception types raised by the filters and forward models."""


class DlrEnkfError(Exception):
    """Base class for all package errors."""


class NumericalError(DlrEnkfError):
    """A numerical failure that aborts a run (mapped to exit code 3 by the CLI)."""


class RankDeficient(NumericalError):
    pass


class NotSPD(NumericalError):
    pass


class NonFinite(NumericalError):
    """NaN or Inf detected; ``step`` records where it happened when known."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SingularInterpolation(NumericalError):
    pass


class NegativeDiffusion(NumericalError):
    pass


class NonPhysical(NumericalError):
    pass


class NewtonDivergence(NumericalError):
    pass


class ConfigError(DlrEnkfError):
    """Invalid configuration (mapped to exit code 2 by the CLI)."""


class MismatchedExperiments(DlrEnkfError):
    pass


class CflViolation(UserWarning):
    pass

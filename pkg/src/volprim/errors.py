"""Exception types shared across the package."""


class VolprimError(Exception):
    """Base class for all volprim errors."""


class InvalidParameterError(VolprimError, ValueError):
    """An input value violates a documented precondition (non-finite, wrong range, ...)."""


class UndefinedPointError(VolprimError, ValueError):
    """A medium property was queried at a point where it is undefined (vacuum)."""


class ContractViolationError(VolprimError, ValueError):
    """Caller broke an interface contract (mismatched shapes, t0 > t1, ...)."""


class TargetDepthError(VolprimError):
    """Requested optical depth exceeds what the segment can supply.

    Distance-sampling search loops catch this and advance to the next segment;
    seeing it escape a top-level call indicates a caller bug.
    """


class TruncatedTraceError(VolprimError):
    """Per-ray event budget or overlap capacity exhausted mid-trace.

    Carries the partial transmittance state accumulated so far in ``state``.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class UnsupportedModeError(VolprimError, ValueError):
    """The requested sampling mode is incompatible with the operation."""

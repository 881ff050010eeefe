"""Exception types shared across the library.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical aborts with 3.
"""


class GaussTraceError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(GaussTraceError, ValueError):
    """An argument violates an operation's preconditions."""


class SceneValidationError(GaussTraceError, ValueError):
    """A scene file is malformed or a record violates an invariant."""


class InvalidLensError(GaussTraceError, ValueError):
    """A fisheye polynomial has no physical ray assignment on the sensor."""


class NumericalAbortError(GaussTraceError, RuntimeError):
    """An optimization produced a non-finite value and cannot continue."""

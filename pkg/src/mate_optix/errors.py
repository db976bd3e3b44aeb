"""Exception types shared across the package.

Plain ValueError is used for malformed arguments (non-finite inputs, ranges);
the classes below mark failures that callers may want to catch and handle
individually.
"""


class RootNotFoundError(RuntimeError):
    """No sign change found in the requested bracket.

    Carries the searched interval so the caller can widen or shift it.
    """

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class DegenerateConfigurationError(RuntimeError):
    """Inputs sit on a removable singularity of a closed form (e.g. |r_m| = 1)."""


class BranchDiscontinuityError(RuntimeError):
    """A traced resonance branch jumped by more than half a free spectral range."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FitFailedError(RuntimeError):
    """Least-squares solve did not reach a usable minimum.

    Carries the last parameter vector for diagnosis.
    """

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


class ModelValidityWarning(UserWarning):
    """An input is outside the regime where a closed form is trustworthy."""

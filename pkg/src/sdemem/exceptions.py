"""Error types shared across the package.

The CLI maps these onto exit codes: configuration errors exit 2, numeric
failures exit 3 and unattained tuning exits 4.
"""


class SdememError(Exception):
    """Base class for package errors."""


class ConfigurationError(SdememError):
    """Invalid user input: unknown model names, malformed files, bad options."""


class NumericError(SdememError):
    """Non-finite state or likelihood encountered during computation."""

    def __init__(self, message, time=None):
        if time is not None:
            message = f"{message} (at time {time!r})"
        super().__init__(message)
        self.time = time


class ParticleCollapseError(NumericError):
    """All particle weights are zero; the likelihood estimate is degenerate."""


class TuningUnattainedError(SdememError):
    """The tuning search exhausted its budget without meeting the target."""

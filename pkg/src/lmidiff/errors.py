"""Exception types raised across the package.

Plain invalid arguments raise ``ValueError``; the classes here mark failure
modes the CLI maps to distinct exit codes.
"""


class FormatError(ValueError):
    """A file could not be parsed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigurationError(ValueError):
    """Model, sampler or run configuration is inconsistent."""


class DegenerateInputError(ValueError):
    """Input data cannot support the requested fit (e.g. too few distinct values)."""


class NumericalDivergenceError(FloatingPointError):
    """Non-finite values appeared during integration or training."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step

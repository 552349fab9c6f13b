"""Exception and warning types."""


class MixedLRMoEError(Exception):
    pass


class InvalidArgumentError(MixedLRMoEError, ValueError):
    pass


class InvalidConfigurationError(MixedLRMoEError, ValueError):
    pass


class InitializationError(MixedLRMoEError, RuntimeError):
    """The starting parameters give a log-likelihood of -inf."""


class MixedLRMoEWarning(UserWarning):
    pass


class SupportWarning(MixedLRMoEWarning):
    pass


class DegenerateWarning(MixedLRMoEWarning):
    """Zero-density rows, empty classes, stalled or singular Newton steps."""


class DataFormatError(InvalidArgumentError):
    """Unparseable input rows; ``lines`` holds the first offending line numbers."""

    def __init__(self, message: str, lines=()):
        super().__init__(message)
        self.lines = list(lines)

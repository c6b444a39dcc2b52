"""Exception types raised across the package."""


class LdviceError(Exception):
    """Base class for all library errors."""


class ShapeError(LdviceError, ValueError):
    pass


class ConfigError(LdviceError, ValueError):
    pass


class RangeError(LdviceError, ValueError):
    pass


class ConditionError(LdviceError, ValueError):
    """Unknown class id or non-finite regression target."""


class OrderingError(LdviceError, ValueError):
    pass


class CorruptArchiveError(LdviceError):
    pass


class ArchiveVersionError(LdviceError):
    pass


class NumericError(LdviceError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step t={step})")
        self.step = step


class TrainingError(LdviceError):
    """Training diverged; ``last_state`` holds the last finite parameters."""

    def __init__(self, message, last_state=None, step=None):
        super().__init__(message)
        self.last_state = last_state
        self.step = step


class CompatibilityError(LdviceError):
    pass


class StateError(LdviceError):
    pass


class UndefinedMetricError(LdviceError, ValueError):
    pass


class EmptyInputError(LdviceError, ValueError):
    pass


class InsufficientDataError(LdviceError, ValueError):
    pass


class NoAlternativeError(ConfigError):
    """Only one class exists, so no counterfactual target can be chosen."""

"""Exception types shared across the package."""


class AudioTextError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AudioTextError, ValueError):
    pass


class NumericError(AudioTextError, ArithmeticError):
    pass


class StateError(AudioTextError, RuntimeError):
    pass


class ConfigError(AudioTextError, ValueError):
    pass


class DegenerateInputError(AudioTextError, ValueError):
    pass


class FormatError(AudioTextError, ValueError):
    pass


class ParseError(AudioTextError, ValueError):
    pass


class CheckpointError(AudioTextError, ValueError):
    pass


class DataError(AudioTextError, ValueError):
    pass


class EvaluationError(AudioTextError, ValueError):
    pass


class StatisticsError(AudioTextError, ValueError):
    pass

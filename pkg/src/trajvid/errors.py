"""Exception hierarchy shared by every module."""


class TrajVidError(Exception):
    """Base class for all package errors."""


class ValidationError(TrajVidError):
    """Bad user input or configuration (CLI exit code 1)."""


class ShapeError(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class PaletteExhausted(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class InvalidSparsity(ValidationError):
    pass


class StepError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class WeightsError(TrajVidError):
    pass


class NumericsError(TrajVidError):
    pass


class UndefinedScore(TrajVidError):
    pass


class ClientError(TrajVidError):
    """An external model client failed or returned a malformed response."""

"""Exception hierarchy shared by all tvflow4d modules."""


class Flow4DError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(Flow4DError, ValueError):
    pass


class ShapeError(Flow4DError, ValueError):
    pass


class NumericalDivergenceError(Flow4DError, ArithmeticError):
    """Raised when the solver produces a non-finite value.

    ``iteration`` is the zero-based iteration index, ``frame`` is filled in by
    the sequence tracker when known.
    """

    def __init__(self, message, iteration=None, frame=None):
        super().__init__(message)
        self.iteration = iteration
        self.frame = frame


class TrainingError(Flow4DError, ArithmeticError):
    def __init__(self, message, epoch=None, weight=None):
        super().__init__(message)
        self.epoch = epoch
        self.weight = weight


class FormatError(Flow4DError):
    """Header does not describe a file of the expected kind or version."""


class LengthError(FormatError):
    """Payload byte count disagrees with the header."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class DataError(FormatError):
    """Payload contains values that are not allowed (NaN, Inf)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index

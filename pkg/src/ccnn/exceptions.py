"""Exception hierarchy shared by the ccnn modules."""


class CCNNError(Exception):
    """Base class for all package errors."""


class InvalidBoxError(CCNNError, ValueError):
    pass


class UnsupportedConventionError(CCNNError, ValueError):
    pass


class DegenerateAnnotationError(CCNNError, ValueError):
    pass


class ShapeError(CCNNError, ValueError):
    """Raised when tensor shapes disagree at a layer boundary."""


class PtsParseError(CCNNError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class NonFiniteError(CCNNError, FloatingPointError):
    """Raised when a loss or gradient stops being finite during training."""


class EmptyDatasetError(CCNNError, ValueError):
    pass

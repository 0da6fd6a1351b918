"""Exception hierarchy shared by every module.

Each class carries a ``category`` used by the command line to report the
failure and pick an exit status.
"""


class NephrosegError(Exception):
    category = "error"
    exit_code = 1


class FormatError(NephrosegError):
    category = "format"
    exit_code = 5


class UnsupportedTypeError(FormatError):
    category = "unsupported-type"


class TruncationError(FormatError):
    category = "truncation"


class ConsistencyError(NephrosegError):
    category = "consistency"
    exit_code = 4


class DomainError(NephrosegError, ValueError):
    category = "domain"


class ModeError(NephrosegError, ValueError):
    category = "mode"


class SizeError(NephrosegError, ValueError):
    category = "size"


class CoverageError(NephrosegError):
    category = "coverage"


class ValidationError(NephrosegError, ValueError):
    category = "validation"


class DegenerateError(NephrosegError, ValueError):
    """Zero variance or zero range where a spread is required."""

    category = "degenerate"


class ShapeError(NephrosegError, ValueError):
    category = "shape"


class NumericalError(NephrosegError, FloatingPointError):
    category = "numerical"

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class DivergenceError(NumericalError):
    category = "divergence"


class GeometryError(NephrosegError, ValueError):
    category = "geometry"
    exit_code = 4


class ConfigError(NephrosegError):
    category = "config"
    exit_code = 2


class MissingInputError(NephrosegError):
    category = "missing-input"
    exit_code = 3


class UndefinedError(NephrosegError, ValueError):
    category = "undefined"


class SampleSizeError(NephrosegError, ValueError):
    category = "sample-size"


class EmptyMatrixError(NephrosegError, ValueError):
    category = "empty-matrix"

"""Exception hierarchy.

Each class carries a ``category`` used for machine-readable CLI errors.
"""


class TissueManifoldError(Exception):
    category = "runtime"


class ConfigurationError(TissueManifoldError, ValueError):
    category = "configuration"


class InputError(TissueManifoldError, ValueError):
    category = "input"


class DegenerateScaleError(InputError):
    category = "degenerate_scale"


class NumericError(TissueManifoldError, FloatingPointError):
    """Raised when a non-finite value appears; ``row`` or ``point`` locate it."""

    category = "numeric"

    def __init__(self, message, row=None, point=None):
        super().__init__(message)
        self.row = row
        self.point = point


class TrainingError(NumericError):
    category = "training"

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class GeometryError(TissueManifoldError):
    category = "geometry"


class FormatError(TissueManifoldError, ValueError):
    """Malformed or inconsistent file contents."""

    category = "validation"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

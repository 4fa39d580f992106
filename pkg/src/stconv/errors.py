"""Exception hierarchy shared by every stconv module.

Each class carries a short machine-readable ``code`` that the CLI prints
alongside the message.
"""


class StConvError(Exception):
    code = "error"


class InvalidShapeError(StConvError):
    code = "invalid-shape"


class ShapeError(StConvError):
    code = "shape"


class GeometryError(StConvError):
    code = "geometry"


class InvalidRangeError(StConvError):
    code = "invalid-range"


class ConfigError(StConvError):
    code = "config"


class LabelError(StConvError):
    code = "label"


class EmptyInputError(StConvError):
    code = "empty-input"


class DegenerateError(StConvError):
    """Raised for degenerate descriptors or single-class training sets."""

    code = "degenerate"


class StratificationError(StConvError):
    code = "stratification"


class InsufficientDataError(StConvError):
    code = "insufficient-data"


class FormatError(StConvError):
    code = "format"

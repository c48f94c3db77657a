"""Exception hierarchy shared by every pipeline stage."""


class CocError(Exception):
    """Base class for all errors raised by cocgrade."""


class ValidationError(CocError, ValueError):
    """Input failed a schema or parameter check (CLI exit code 2)."""


class InvalidGeometry(ValidationError):
    pass


class InvalidParams(ValidationError):
    pass


class DegenerateChannel(ValidationError):
    pass


class InvalidSeed(ValidationError):
    pass


class InvalidData(ValidationError):
    pass


class InvalidPosterior(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyTrainingSet(ValidationError):
    pass


class IncompatibleModel(ValidationError):
    pass


class SegmentationFailed(CocError):
    """The contour or region stage could not produce a usable result."""


class DegenerateFit(SegmentationFailed):
    pass


class EmptyRegion(SegmentationFailed):
    pass

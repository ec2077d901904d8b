"""Exception hierarchy shared by every stage of the pipeline."""


class MisureError(Exception):
    """Base class for all package errors."""


class InputShapeError(MisureError, ValueError):
    """Image shape does not match what the adapter expects."""


class ShapeError(MisureError, ValueError):
    """Two arrays that must align have different shapes."""


class CapabilityError(MisureError):
    """The adapter does not provide an optional capability (vjp, activations)."""


class TrainingDivergedError(MisureError):
    pass


class ClassAbsentError(MisureError):
    """The requested class is not present in the reference prediction."""


class MaxDilationsExceeded(MisureError):
    pass


class NumericalError(MisureError, FloatingPointError):
    pass


class DataSourceError(MisureError):
    pass


class PlacementError(MisureError):
    pass


class FormatError(MisureError):
    """A serialized artifact is corrupt, truncated or of an unknown version."""


class RecordError(MisureError):
    """A saliency record lacks a field required downstream."""


class DegenerateLabelsError(MisureError, ValueError):
    pass


class DegenerateFeatureError(MisureError, ValueError):
    pass


class EmptyInputError(MisureError, ValueError):
    pass


class ConfigError(MisureError, ValueError):
    pass

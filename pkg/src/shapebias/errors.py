"""Exception types shared across the package."""


class ShapeBiasError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ShapeBiasError, ValueError):
    """A tensor had the wrong shape along some axis."""


class ConfigurationError(ShapeBiasError, ValueError):
    """Parameters are outside their valid range or mutually inconsistent."""


class StateError(ShapeBiasError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class FormatError(ShapeBiasError, ValueError):
    """A file does not follow the expected binary or text layout."""


class LoadError(FormatError):
    """A checkpoint could not be restored."""


class AlignmentError(ShapeBiasError, ValueError):
    """Two datasets that must be index-aligned are not."""


class MergeError(ShapeBiasError, ValueError):
    """Report rows collide on their key."""


class TrainingDivergence(ShapeBiasError, FloatingPointError):
    """The training loss became non-finite."""

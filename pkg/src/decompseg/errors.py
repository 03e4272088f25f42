"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes disagree along a named axis."""


class ConfigurationError(ValueError):
    """A model, classifier or run is configured inconsistently."""


class NumericError(FloatingPointError):
    """A loss or network output became non-finite."""


class ResourceError(RuntimeError):
    """Files, images or pretrained weights are missing or insufficient."""


class InputError(ValueError):
    """An argument is outside the accepted domain."""


class LoadError(IOError):
    """An image or manifest on disk could not be read."""


class SpecMismatchError(ValueError):
    """A checkpoint was written for a different model specification."""

    def __init__(self, message, diff=None):
        super().__init__(message)
        self.diff = diff or {}

"""Exception types shared across fragmix."""


class FragmixError(Exception):
    """Base class for all fragmix errors."""


class DimensionError(FragmixError, ValueError):
    """Tensor shapes or axes are incompatible."""


class ConfigError(FragmixError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(FragmixError, ValueError):
    """Input data is malformed (bad labels, empty images, duplicate ids...)."""


class ResolutionMismatchError(DimensionError):
    """Input resolution differs from the one the model was built for."""

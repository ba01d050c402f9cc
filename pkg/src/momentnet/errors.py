"""Exception hierarchy shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent run/model configuration."""


class FormatError(ValueError):
    """A binary file (checkpoint, dataset record, image) is malformed."""


class NumericsError(RuntimeError):
    """Non-finite values appeared where the computation requires finite ones."""


class DegenerateImageError(ValueError):
    """Moment computation is undefined for this image (e.g. zero mass)."""


class OrientationUndefinedError(DegenerateImageError):
    """Second-order moments are isotropic; no principal axis exists."""


class GenerationError(ValueError):
    """Synthetic data generation could not satisfy its own constraints."""

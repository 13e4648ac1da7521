"""Exception types raised across the package."""


class VoxelFormatError(ValueError):
    """A file on disk does not match the expected layout."""


class ShapeMismatchError(ValueError):
    """Two inputs that must share grid dimensions do not."""


class ConfigError(ValueError):
    """Invalid thresholds, policies or command-line configuration."""


class SpecError(ValueError):
    """A synthetic scene description is invalid or unsupported."""

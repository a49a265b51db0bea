"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, file, or combination of settings."""


class ContractionError(RuntimeError):
    """Fixed-point iteration failed because the map does not contract."""

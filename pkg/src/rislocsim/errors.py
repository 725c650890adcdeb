"""Exception types shared across the toolkit."""


class GeometryError(ValueError):
    """Degenerate geometry (zero range, invalid rotation, bad epoch index)."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class DegenerateSignalError(RuntimeError):
    """Signal structure collapsed (rank loss, flat search objective)."""


class InfeasibleGeometryError(RuntimeError):
    """State estimation system is rank deficient for the given epochs."""

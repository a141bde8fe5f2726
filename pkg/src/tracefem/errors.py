"""Exception types shared across the package."""


class GeometryError(Exception):
    """Raised when the implicit-surface geometry cannot be resolved.

    Carries the offending cell id in ``cell`` when applicable.
    """

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class SolverError(Exception):
    """Raised on linear-solver breakdown (non-SPD system detected)."""


class ConfigError(ValueError):
    """Raised for invalid run configurations."""

"""Exception types shared across the package."""


class SapmapError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SapmapError):
    """Malformed input file or byte stream.

    Carries the 1-based line (or row) number where parsing failed when
    available.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FrameMismatchError(SapmapError):
    """An operation was applied to data tagged with the wrong coordinate frame."""


class DegenerateGeometryError(SapmapError):
    """Input geometry does not constrain the requested fit (coincident or
    collinear points, zero variance, ...)."""


class AssociationError(SapmapError):
    """Timestamp association produced too few usable pairs."""


class SolverError(SapmapError):
    """An iterative solver failed to converge within its iteration cap."""


class RegistryError(SapmapError):
    """Registry constraint violation (duplicate key, missing artifact, corrupt index)."""


class ConfigError(SapmapError):
    """Invalid pipeline configuration."""

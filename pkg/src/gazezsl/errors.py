"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class NumericalError(ArithmeticError):
    """A numerical invariant was violated (NaN/Inf, zero vector in strict mode)."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DataFormatError(RuntimeError):
    """Base class for persistence errors."""


class VersionError(DataFormatError):
    """On-disk format version is not supported."""


class TruncatedBlobError(DataFormatError):
    """A binary blob is shorter or longer than its manifest declares."""


class ChecksumError(DataFormatError):
    """A binary blob fails its CRC32 check."""

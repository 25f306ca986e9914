"""Exception hierarchy shared by every module of the package."""


class TactileMapError(Exception):
    """Base class for all errors raised by tactile_map."""


class ConfigurationError(TactileMapError, ValueError):
    """Inputs are inconsistent with the sensor or model configuration."""


class UsageError(TactileMapError, ValueError):
    """A function was called with arguments that violate its contract."""


class DegenerateGeometryError(TactileMapError):
    """Point configuration does not determine a rigid transform."""


class NoOverlapError(TactileMapError):
    """ICP found too few gated correspondences.

    ``result`` holds the initialization wrapped as a non-converged IcpResult so
    callers can fall back to it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NumericalFailureError(TactileMapError):
    """An iterative solver did not reach its residual target."""


class FitFailureError(TactileMapError):
    """Primitive fitting did not converge; ``best`` carries the best-so-far fit."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class UndefinedMetricError(TactileMapError):
    """A metric was requested over an empty support."""


class ModelGrammarError(TactileMapError, ValueError):
    """An object model file could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyMapError(TactileMapError):
    """Map building produced no usable entries."""


class NoMatchError(TactileMapError):
    """No map entry survived similarity filtering."""


class MapFormatError(TactileMapError):
    """Base class for tactile map / calibration file decoding failures."""

    code = "format"


class BadMagicError(MapFormatError):
    code = "bad-magic"


class VersionMismatchError(MapFormatError):
    code = "version-mismatch"


class ChecksumError(MapFormatError):
    code = "checksum"


class TruncatedFileError(ChecksumError):
    # a short file can never match its stored CRC, so it is a checksum failure too
    code = "truncated"

"""Exception types raised across the package."""


class LayeredJSCCError(Exception):
    """Base class for all package errors."""


class AllZeroInput(LayeredJSCCError, ValueError):
    """An encoder output vector has (numerically) zero norm."""


class ShapeMismatch(LayeredJSCCError, ValueError):
    pass


class EmptyBatch(LayeredJSCCError, ValueError):
    pass


class InvalidM(LayeredJSCCError, ValueError):
    pass


class NegativeMse(LayeredJSCCError, ValueError):
    pass


class ConfigMismatch(LayeredJSCCError, ValueError):
    pass


class GridMismatch(LayeredJSCCError, ValueError):
    pass


class EmptyResults(LayeredJSCCError, ValueError):
    pass


class DatasetNotFound(LayeredJSCCError, FileNotFoundError):
    pass


class CorruptArchive(LayeredJSCCError, IOError):
    pass


class DivergenceDetected(LayeredJSCCError, RuntimeError):
    pass


class SchemaVersionMismatch(LayeredJSCCError, ValueError):
    pass


class IoFailure(LayeredJSCCError, IOError):
    pass

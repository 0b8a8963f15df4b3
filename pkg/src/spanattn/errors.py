"""Exception hierarchy shared across the package."""


class SpanAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(SpanAttnError):
    """Operand dimensions do not agree."""


class ConfigError(SpanAttnError):
    """Invalid configuration value or combination."""


class UsageError(SpanAttnError):
    """API called in an unsupported way (non-scalar loss, double merge, ...)."""


class InputError(SpanAttnError):
    """Invalid runtime input (out-of-vocab token, malformed stream)."""


class NumericError(SpanAttnError):
    """NaN/Inf produced by a numeric primitive."""


class GenerationError(SpanAttnError):
    """A task generator cannot satisfy its parameters."""


class InvariantError(SpanAttnError):
    """An internal consistency check failed (inconsistent retrieval trace, ...)."""

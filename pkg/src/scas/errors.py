"""Exception types shared across the engine."""


class ScasError(Exception):
    """Base class for all engine errors."""


class TraceFormatError(ScasError):
    """Malformed or invariant-violating trace data; message names the offending record."""


class ConfigError(ScasError):
    """Invalid configuration value (lambda out of range, unknown variant, ...)."""


class OracleError(ScasError):
    """Tiny-model contract violation: bad token ids, non-finite loss, zero hidden state."""


class DegenerateRankingError(ScasError):
    """Correlation undefined: zero rank/value variance on one side."""

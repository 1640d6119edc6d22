"""Exception hierarchy shared by all colonyeval modules.

The CLI maps these onto its exit-code contract: validation and
configuration problems exit 2, I/O and provider transport problems exit 1.
"""


class ColonyEvalError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(ColonyEvalError):
    """Invalid geometry: degenerate box, dimension mismatch, bad RLE."""


class ConfigError(ColonyEvalError):
    """Invalid configuration value, flag, or config-file key."""


class ValidationError(ColonyEvalError):
    """Input data failed schema or referential-integrity checks."""


class UndefinedMetricError(ColonyEvalError):
    """A metric is undefined for the given input (e.g. zero ground truths)."""


class ProviderError(ColonyEvalError):
    """Base class for failures at the inference-provider boundary."""


class RemoteError(ProviderError):
    """Provider answered with a non-success HTTP status."""

    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class ProtocolError(ProviderError):
    """Provider response violates the wire contract (never retried)."""


class ProviderUnreachable(ProviderError):
    """Transport-level failure that persisted through all retries."""

"""Exception types shared across the package."""


class StreamRiskError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StreamRiskError):
    """A config object is internally inconsistent or infeasible."""


class OutOfRangeError(StreamRiskError):
    """A timestamp falls outside the session horizon."""


class DegenerateSessionError(StreamRiskError):
    """A session has no usable actions or patches left."""


class UndefinedMetricError(StreamRiskError):
    """A metric was requested on a score set missing a required class."""


class PromptValidationError(StreamRiskError):
    """A prompt request violates the documented request schema."""


class ResponseParseError(StreamRiskError):
    """A model response could not be parsed into the documented schema."""


class OracleError(StreamRiskError):
    """The deterministic mock teacher was asked about unknown data."""

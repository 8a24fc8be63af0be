"""Exception types shared across the package."""


class TempogroundError(Exception):
    """Base class for all package-defined errors."""


class DimensionError(TempogroundError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(TempogroundError):
    """A configuration value is missing, unknown, or out of range."""


class NonFiniteError(TempogroundError):
    """A forward/backward value or gradient became NaN or infinite."""


class CheckpointError(TempogroundError):
    """Tensor container is malformed or has an unsupported version."""


class GenerationError(TempogroundError):
    """Synthetic corpus generation cannot satisfy its constraints."""


class SamplingError(TempogroundError):
    """A view cannot be sampled from the given sequence."""


class DatasetParseError(TempogroundError):
    """A dataset file line is malformed.

    Carries the 1-based line number when parsing JSONL.
    """

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CitationError(TempogroundError):
    """Base class for response citation violations."""


class NoCitationError(CitationError):
    """Response contains no span id token."""


class MultipleCitationsError(CitationError):
    """Response contains more than one span id token."""


class InvalidSpanIdError(CitationError):
    """Cited span id is outside 1..K."""


class EvalError(TempogroundError):
    """A metric is undefined for the given inputs."""


class PrerequisiteError(TempogroundError):
    """A pipeline command is missing a required input artifact."""

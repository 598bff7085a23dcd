"""Exception types shared across the package."""


class PromptselError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PromptselError, ValueError):
    """A file could not be parsed; the message names the offending line."""


class ValidationError(PromptselError, ValueError):
    """Data violates an invariant (duplicate id, empty field, tag mismatch)."""


class ShapeError(PromptselError, ValueError):
    """Array dimensions disagree with what the caller supplied."""


class DataError(PromptselError, ValueError):
    """Numeric payload is unusable (non-finite values)."""


class EmptyBankError(PromptselError, ValueError):
    """An operation that needs examples was given an empty bank."""


class DegenerateVectorError(PromptselError, ValueError):
    """A vector with (near-)zero norm where a direction is required."""


class ParameterError(PromptselError, ValueError):
    """An argument is out of its documented range."""


class TransportError(PromptselError, RuntimeError):
    """A remote backend stayed unreachable after the configured retries."""


class ProtocolError(PromptselError, RuntimeError):
    """A remote backend answered with a malformed payload."""


class TemplateError(PromptselError, ValueError):
    """A prompt template slot could not be filled; the message names it."""


class ConfigError(PromptselError, ValueError):
    """A run configuration field is missing, unknown, or invalid."""

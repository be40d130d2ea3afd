"""Exception types shared across the package."""


class CtrltabError(Exception):
    """Base class for all package errors."""


class ValidationError(CtrltabError):
    """A record or request violates a structural invariant."""


class ConfigError(CtrltabError):
    """A configuration value is out of its legal range."""


class SchemaError(CtrltabError):
    """An input file does not match the expected schema."""


class TemplateError(CtrltabError):
    """A prompt template is missing a required slot."""


class TransportError(CtrltabError):
    """An HTTP request failed after exhausting retries."""


class EmptyOutputError(CtrltabError):
    """A completion endpoint returned an empty result."""


class CheckpointError(CtrltabError):
    """A model checkpoint is malformed or inconsistent."""

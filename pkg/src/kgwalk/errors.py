"""Exception hierarchy shared across the package."""

from __future__ import annotations


class KGWalkError(Exception):
    """Base class for all package errors."""


class IngestionError(KGWalkError):
    """A triple record could not be ingested."""

    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index


class NotFoundError(KGWalkError, LookupError):
    """An entity or name is not present in the graph."""


class BackendError(KGWalkError):
    """The graph backend failed (after retries, for remote backends)."""


class TemplateError(KGWalkError):
    """A query or prompt template is missing a binding."""


class ArgumentError(KGWalkError, ValueError):
    """An operation received arguments violating its preconditions."""


class SampleExhaustedError(KGWalkError):
    """The random-walk sampler ran out of attempts."""


class GatewayError(KGWalkError):
    """The LLM gateway gave up after retries."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class ProtocolError(KGWalkError):
    """A provider returned a payload we cannot interpret."""


class TurnParseError(KGWalkError):
    """Base for agent-turn parse failures. ``code`` is a stable short tag."""

    code = "malformed"


class MalformedTurnError(TurnParseError):
    code = "malformed"


class AmbiguousTurnError(TurnParseError):
    code = "ambiguous"


class UnknownToolError(TurnParseError):
    code = "unknown-tool"


class SchemaVersionError(KGWalkError):
    """A serialized record has a missing or unsupported schema version."""


class AssemblyError(KGWalkError):
    """Synthesis steps could not be assembled into a trajectory."""


class SynthesisError(KGWalkError):
    """A synthesis phase rejected a record; ``reason`` names the counter."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class ScoreParseError(SynthesisError):
    def __init__(self, message: str = ""):
        super().__init__("score-parse", message)


class MetricDefinitionError(KGWalkError, ValueError):
    """A metric was asked for on inputs where it is undefined."""


class ConfigError(KGWalkError):
    """Configuration failed validation."""

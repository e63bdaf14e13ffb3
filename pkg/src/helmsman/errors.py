"""Engine error taxonomy.

Every error carries a machine-readable ``code`` plus a ``details`` map so
the HTTP layer can surface exactly what the underlying module raised.
"""

from __future__ import annotations

from typing import Any


class EngineError(Exception):
    """Base class for all engine errors."""

    code = "engine_error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details: dict[str, Any] = details

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


# --- parsing / loading ---------------------------------------------------

class ParseError(EngineError):
    code = "parse_error"


class DuplicateRule(EngineError):
    code = "duplicate_rule"


class DuplicateId(EngineError):
    code = "duplicate_id"


class EmptySubtasks(EngineError):
    code = "empty_subtasks"


class DanglingFragment(EngineError):
    code = "dangling_fragment"


class NotFound(EngineError):
    code = "not_found"


# --- llm gateway ----------------------------------------------------------

class BackendUnavailable(EngineError):
    code = "backend_unavailable"


class ScriptMiss(EngineError):
    code = "script_miss"


# --- routing --------------------------------------------------------------

class RoundsExhausted(EngineError):
    code = "rounds_exhausted"


class NoCandidatesLeft(EngineError):
    code = "no_candidates_left"


# --- documentation corpus --------------------------------------------------

class MappingMiss(EngineError):
    code = "mapping_miss"


class SanitizeReject(EngineError):
    code = "sanitize_reject"


class AssetMiss(EngineError):
    code = "asset_miss"


class UnknownFragment(EngineError):
    code = "unknown_fragment"


class EmptySelection(EngineError):
    code = "empty_selection"


class DocNotFound(EngineError):
    code = "doc_not_found"


# --- plugin registry --------------------------------------------------------

class DuplicateBundled(EngineError):
    code = "duplicate_bundled"


class InvalidManifest(EngineError):
    """Manifest failed validation; ``details['errors']`` lists field errors."""

    code = "invalid_manifest"

    def __init__(self, errors: list[str]) -> None:
        super().__init__("invalid manifest: " + "; ".join(errors), errors=errors)


class MissingRequired(EngineError):
    code = "missing_required"


class TypeMismatch(EngineError):
    code = "type_mismatch"


class UnknownArgument(EngineError):
    code = "unknown_argument"


class EnumViolation(EngineError):
    code = "enum_violation"


# --- recommender -------------------------------------------------------------

class EmptyRegistry(EngineError):
    code = "empty_registry"


class NotRecommended(EngineError):
    code = "not_recommended"


class AlreadyChosen(EngineError):
    code = "already_chosen"


# --- executor ----------------------------------------------------------------

class ValidationFailed(EngineError):
    code = "validation_failed"


class SubprocessFailed(EngineError):
    code = "subprocess_failed"


class ExecutionTimeout(EngineError):
    code = "execution_timeout"


class UnknownSnapshot(EngineError):
    code = "unknown_snapshot"


# --- session -------------------------------------------------------------------

class IllegalTransition(EngineError):
    code = "illegal_transition"

    def __init__(self, phase: str, event: str) -> None:
        super().__init__(
            f"event {event!r} is not legal in phase {phase!r}", phase=phase, event=event
        )


class CorruptRecord(EngineError):
    code = "corrupt_record"


class SessionBusy(EngineError):
    code = "session_busy"

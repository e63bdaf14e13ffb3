"""Uniform interface to language-model backends.

Two backends share one request shape: a deterministic scripted backend
driven by a rule file (used by every test), and an HTTP backend for real
models. The scripted backend matches rules in file order against the last
user message; first match wins and the reply is bit-identical across runs.

Script file format (UTF-8, one rule per line, ``#`` starts a comment):

    <purpose_tag> TAB <match-kind:exact|substring|regex> TAB <pattern> TAB <response>

``\\n``, ``\\t`` and ``\\\\`` escapes in the response field are decoded.
"""

from __future__ import annotations

import os
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

import httpx

from .errors import BackendUnavailable, DuplicateRule, ParseError, ScriptMiss


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class PurposeTag(str, Enum):
    ROUTE_MAIN = "route_main"
    ROUTE_SUB = "route_sub"
    QA_ANSWER = "qa_answer"
    RECOMMEND = "recommend"
    AUGMENT = "augment"


class BackendKind(str, Enum):
    SCRIPTED = "scripted"
    HTTP = "http"


class MatchKind(str, Enum):
    EXACT = "exact"
    SUBSTRING = "substring"
    REGEX = "regex"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))
        if not self.content.strip():
            raise ValueError("message content must be non-empty after trimming")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    purpose_tag: PurposeTag
    max_response_chars: int = 4000
    temperature_hint: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.messages, tuple):
            object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role is not Role.SYSTEM:
            raise ValueError("first message must have role=system")
        if self.max_response_chars <= 0:
            raise ValueError("max_response_chars must be positive")
        if not 0.0 <= self.temperature_hint <= 1.0:
            raise ValueError("temperature_hint must be in [0, 1]")

    def last_user_text(self) -> str:
        for msg in reversed(self.messages):
            if msg.role is Role.USER:
                return msg.content
        return ""


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    endpoint: str | None = None
    api_key_ref: str | None = None
    script_path: str | Path | None = None
    timeout_ms: int = 10_000

    def __post_init__(self) -> None:
        if not isinstance(self.kind, BackendKind):
            object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.kind is BackendKind.HTTP and not self.endpoint:
            raise ValueError("http backend requires an endpoint")
        if self.kind is BackendKind.SCRIPTED and not self.script_path:
            raise ValueError("scripted backend requires a script_path")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be > 0")


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


@dataclass(frozen=True)
class ScriptRule:
    purpose: PurposeTag
    match: MatchKind
    pattern: str
    response: str
    line_no: int

    def matches(self, text: str) -> bool:
        if self.match is MatchKind.EXACT:
            return text == self.pattern
        if self.match is MatchKind.SUBSTRING:
            return self.pattern in text
        return re.search(self.pattern, text) is not None


_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\"}


def _unescape(raw: str, line_no: int) -> str:
    out: list[str] = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "\\":
            if i + 1 >= len(raw) or raw[i + 1] not in _ESCAPES:
                raise ParseError(
                    f"line {line_no}: bad escape in response field", line=line_no
                )
            out.append(_ESCAPES[raw[i + 1]])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


class ScriptedBackend:
    """Rule-driven deterministic backend; read-only after load."""

    def __init__(self, rules: list[ScriptRule], source: str = "<memory>") -> None:
        self.rules = tuple(rules)
        self.source = source

    def complete(self, request: CompletionRequest) -> str:
        text = request.last_user_text()
        for rule in self.rules:
            if rule.purpose is request.purpose_tag and rule.matches(text):
                return rule.response
        raise ScriptMiss(
            f"no rule for purpose={request.purpose_tag.value} matches {text!r} "
            f"(script {self.source})",
            purpose=request.purpose_tag.value,
            text=text,
        )


def load_script(path: str | Path) -> ScriptedBackend:
    """Parse a script file into a backend; duplicate (purpose, pattern) pairs
    and malformed lines are errors, never silently skipped."""
    path = Path(path)
    rules: list[ScriptRule] = []
    seen: set[tuple[str, str]] = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read script {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(
                f"line {line_no}: expected 4 tab-separated fields, got {len(parts)}",
                line=line_no,
            )
        purpose_raw, kind_raw, pattern, response_raw = parts
        try:
            purpose = PurposeTag(purpose_raw)
        except ValueError:
            raise ParseError(
                f"line {line_no}: unknown purpose tag {purpose_raw!r}", line=line_no
            ) from None
        try:
            kind = MatchKind(kind_raw)
        except ValueError:
            raise ParseError(
                f"line {line_no}: unknown match kind {kind_raw!r}", line=line_no
            ) from None
        if not pattern:
            raise ParseError(f"line {line_no}: empty pattern", line=line_no)
        if kind is MatchKind.REGEX:
            try:
                re.compile(pattern)
            except re.error as exc:
                raise ParseError(
                    f"line {line_no}: bad regex: {exc}", line=line_no
                ) from exc
        key = (purpose.value, pattern)
        if key in seen:
            raise DuplicateRule(
                f"line {line_no}: duplicate rule ({purpose.value}, {pattern!r})",
                purpose=purpose.value,
                pattern=pattern,
            )
        seen.add(key)
        rules.append(
            ScriptRule(purpose, kind, pattern, _unescape(response_raw, line_no), line_no)
        )
    return ScriptedBackend(rules, source=str(path))


class HttpBackend:
    """POSTs the request as JSON to a completion endpoint.

    Expects a ``{"text": ...}`` JSON reply. One retry on timeout, then
    BackendUnavailable.
    """

    def __init__(
        self, endpoint: str, api_key_ref: str | None = None, timeout_ms: int = 10_000
    ) -> None:
        self.endpoint = endpoint
        self.api_key_ref = api_key_ref
        self.timeout_ms = timeout_ms

    def _headers(self) -> dict[str, str]:
        headers = {"content-type": "application/json"}
        if self.api_key_ref:
            key = os.environ.get(self.api_key_ref, "")
            if key:
                headers["authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: CompletionRequest) -> str:
        body = {
            "messages": [
                {"role": m.role.value, "content": m.content} for m in request.messages
            ],
            "purpose": request.purpose_tag.value,
            "max_chars": request.max_response_chars,
            "temperature": request.temperature_hint,
        }
        timeout = self.timeout_ms / 1000.0
        last_exc: Exception | None = None
        for _ in range(2):  # single retry on timeout only
            try:
                resp = httpx.post(
                    self.endpoint, json=body, headers=self._headers(), timeout=timeout
                )
                resp.raise_for_status()
                return str(resp.json()["text"])
            except httpx.TimeoutException as exc:
                last_exc = exc
                continue
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise BackendUnavailable(
                    f"http backend {self.endpoint} failed: {exc}"
                ) from exc
        raise BackendUnavailable(
            f"http backend {self.endpoint} timed out after retry"
        ) from last_exc


class RecordingBackend:
    """Wraps another backend and records every request it sees."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.requests: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.requests.append(request)
        return self.inner.complete(request)

    def prompts_text(self) -> list[str]:
        """Full prompt text (all message contents joined) per recorded call."""
        return ["\n".join(m.content for m in r.messages) for r in self.requests]


def build_backend(config: BackendConfig) -> Backend:
    if config.kind is BackendKind.SCRIPTED:
        return load_script(config.script_path)  # type: ignore[arg-type]
    return HttpBackend(config.endpoint, config.api_key_ref, config.timeout_ms)  # type: ignore[arg-type]


def complete(request: CompletionRequest, config: BackendConfig) -> str:
    """One-shot completion against the backend described by ``config``."""
    return build_backend(config).complete(request)

"""Grounded question answering plus the chat-log augmentation store.

Answers are grounded against the active tailored document: the model is
instructed to cite fragments as ``[fragment-id]`` and an answer counts as
grounded only when it cites at least one fragment and every cited marker
exists in the supplied context. Knowledge distilled from chat logs lands
in an append-only store and is folded into future prompts under a
"Previously learned notes" section, most recent first.
"""

from __future__ import annotations

import re
import threading
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import json

from .errors import CorruptRecord
from .llm_gateway import Backend, ChatMessage, CompletionRequest, PurposeTag, Role
from .types import utc_now_rfc3339

CITATION_RE = re.compile(r"\[([a-z0-9-]{1,64})\]")
CONTEXT_MARKER = "== {fragment_id} =="

GROUNDING_INSTRUCTION = (
    "Answer strictly from the documentation context below. Cite every "
    "fragment you rely on as [fragment-id]. If the context does not cover "
    "the question, say so and cite nothing."
)

AUGMENT_INSTRUCTION = (
    "Distill this chat log into at most {max_notes} short factual notes, "
    "one per line, no numbering. Return an empty response if there is "
    "nothing worth keeping."
)

NOTES_HEADER = "Previously learned notes"

DEFAULT_UNGROUNDED_STREAK = 3
DEFAULT_GROUNDING_WINDOW = 5
DEFAULT_GROUNDING_MIN_FRACTION = 0.4
DEFAULT_MAX_NOTES = 5
DEFAULT_NOTES_CHAR_CAP = 2000
TOPIC_SHIFT_MARKER = "/topic "


class AugmentationSource(str, Enum):
    CHAT_LOG = "chat_log"
    USER_NOTE = "user_note"


class BottleneckKind(str, Enum):
    EXPLICIT_TOPIC_SHIFT = "explicit_topic_shift"
    REPEATED_UNANSWERED = "repeated_unanswered"
    LOW_GROUNDING = "low_grounding"


@dataclass(frozen=True)
class QaExchange:
    question: str
    answer: str
    cited_fragments: tuple[str, ...]
    grounded: bool
    timestamp: str


@dataclass(frozen=True)
class AugmentationRecord:
    record_id: str
    source: AugmentationSource
    topic_hint: str
    content: str
    session_id: str
    created_at: str

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "source": self.source.value,
            "topic_hint": self.topic_hint,
            "content": self.content,
            "session_id": self.session_id,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class BottleneckSignal:
    kind: BottleneckKind
    evidence: str


class AugmentationStore:
    """Append-only JSONL store; records are never mutated or deleted."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._records: list[AugmentationRecord] = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        for line_no, line in enumerate(
            self.path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                self._records.append(
                    AugmentationRecord(
                        record_id=raw["record_id"],
                        source=AugmentationSource(raw["source"]),
                        topic_hint=raw["topic_hint"],
                        content=raw["content"],
                        session_id=raw["session_id"],
                        created_at=raw["created_at"],
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorruptRecord(
                    f"augmentation store line {line_no}: {exc}", line=line_no
                ) from exc

    def append(self, record: AugmentationRecord) -> None:
        with self._lock:
            self._records.append(record)
            if self.path:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    def records(self) -> list[AugmentationRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


def extract_citations(text: str) -> list[str]:
    """Bracketed slugs in answer text, deduped, order preserved."""
    seen: list[str] = []
    for slug in CITATION_RE.findall(text):
        if slug not in seen:
            seen.append(slug)
    return seen


def serialize_notes(
    records: list[AugmentationRecord], char_cap: int = DEFAULT_NOTES_CHAR_CAP
) -> str:
    """Fenced notes section, most recent first, bounded by ``char_cap``."""
    if not records:
        return ""
    lines: list[str] = []
    used = 0
    for record in reversed(records):
        cost = len(record.content) + 1
        if used + cost > char_cap and lines:
            break
        lines.append(record.content)
        used += cost
    return NOTES_HEADER + ":\n```\n" + "\n".join(lines) + "\n```"


def build_qa_request(
    question: str, context: str, augmentations: list[AugmentationRecord]
) -> CompletionRequest:
    user_parts = ["Documentation context:\n" + context]
    notes = serialize_notes(augmentations)
    if notes:
        user_parts.append(notes)
    user_parts.append("Question: " + question)
    return CompletionRequest(
        messages=(
            ChatMessage(Role.SYSTEM, GROUNDING_INSTRUCTION),
            ChatMessage(Role.USER, "\n\n".join(user_parts)),
        ),
        purpose_tag=PurposeTag.QA_ANSWER,
    )


def answer(
    question: str,
    context: str,
    augmentations: list[AugmentationRecord],
    backend: Backend,
    *,
    clock: Callable[[], str] = utc_now_rfc3339,
) -> QaExchange:
    """Ask the backend over the given context and validate its citations."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    reply = backend.complete(build_qa_request(question, context, augmentations))
    cited = extract_citations(reply)
    valid = [
        fid for fid in cited
        if CONTEXT_MARKER.format(fragment_id=fid) in context
    ]
    grounded = bool(cited) and len(valid) == len(cited)
    return QaExchange(
        question=question,
        answer=reply,
        cited_fragments=tuple(valid),
        grounded=grounded,
        timestamp=clock(),
    )


def detect_bottleneck(
    recent_exchanges: list[QaExchange],
    latest_user_text: str,
    *,
    ungrounded_streak: int = DEFAULT_UNGROUNDED_STREAK,
    window: int = DEFAULT_GROUNDING_WINDOW,
    min_fraction: float = DEFAULT_GROUNDING_MIN_FRACTION,
) -> BottleneckSignal | None:
    """Detection rules, checked in order of explicitness:

    1. user text starts with the topic-shift marker;
    2. last ``ungrounded_streak`` answers all ungrounded;
    3. grounded fraction over the last ``window`` answers below ``min_fraction``
       (needs a full window).
    """
    if latest_user_text.startswith(TOPIC_SHIFT_MARKER):
        return BottleneckSignal(
            BottleneckKind.EXPLICIT_TOPIC_SHIFT,
            evidence=latest_user_text.strip(),
        )
    tail = recent_exchanges[-ungrounded_streak:]
    if len(tail) == ungrounded_streak and all(not e.grounded for e in tail):
        return BottleneckSignal(
            BottleneckKind.REPEATED_UNANSWERED,
            evidence=f"last {ungrounded_streak} answers ungrounded",
        )
    windowed = recent_exchanges[-window:]
    if len(windowed) >= window:
        fraction = sum(1 for e in windowed if e.grounded) / len(windowed)
        if fraction < min_fraction:
            return BottleneckSignal(
                BottleneckKind.LOW_GROUNDING,
                evidence=f"grounded fraction {fraction:.2f} over last {len(windowed)}",
            )
    return None


def augment_from_log(
    session_log: list[ChatMessage],
    backend: Backend,
    *,
    session_id: str,
    store: AugmentationStore,
    topic_hint: str = "",
    max_notes: int = DEFAULT_MAX_NOTES,
    clock: Callable[[], str] = utc_now_rfc3339,
) -> list[AugmentationRecord]:
    """Distill the session log into notes and append them to the store."""
    if not session_log:
        raise ValueError("session log must be non-empty")
    transcript = "\n".join(f"{m.role.value}: {m.content}" for m in session_log)
    reply = backend.complete(
        CompletionRequest(
            messages=(
                ChatMessage(Role.SYSTEM, AUGMENT_INSTRUCTION.format(max_notes=max_notes)),
                ChatMessage(Role.USER, transcript),
            ),
            purpose_tag=PurposeTag.AUGMENT,
        )
    )
    notes = [line.strip() for line in reply.splitlines() if line.strip()]
    records: list[AugmentationRecord] = []
    for note in notes[:max_notes]:
        record = AugmentationRecord(
            record_id=uuid.uuid4().hex,
            source=AugmentationSource.CHAT_LOG,
            topic_hint=topic_hint,
            content=note,
            session_id=session_id,
            created_at=clock(),
        )
        store.append(record)
        records.append(record)
    return records

"""Two-stage task selection with a dissatisfaction-feedback loop.

Stage one picks 1-3 main-task candidates for the user's query; stage two
picks exactly one subtask within the confirmed main task. Model output is
never trusted: it is parsed as a comma-separated id list and repaired
(drop unknown or rejected ids, dedupe keeping first, truncate). If repair
leaves nothing, a deterministic lexical ranking over task descriptions
takes over, so the router always terminates with a valid selection or a
typed error. The router itself is stateless; episode state lives with the
session.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import NoCandidatesLeft, RoundsExhausted
from .lexical import rank_by_overlap
from .llm_gateway import (
    Backend,
    ChatMessage,
    CompletionRequest,
    PurposeTag,
    Role,
)
from .taxonomy import MainTask, TaskTaxonomy, routing_digest, subtask_digest
from .types import Language

DEFAULT_MAX_ROUNDS = 3
MAX_MAIN_CANDIDATES = 3


@dataclass(frozen=True)
class MainSelection:
    candidates: tuple[str, ...]
    rationale_text: str
    round: int


@dataclass(frozen=True)
class SubSelection:
    main_id: str
    subtask_id: str
    rationale_text: str


@dataclass(frozen=True)
class RejectionFeedback:
    rejected_ids: tuple[str, ...]
    reason: str
    scope: str  # "main" | "sub"

    def __post_init__(self) -> None:
        if not isinstance(self.rejected_ids, tuple):
            object.__setattr__(self, "rejected_ids", tuple(self.rejected_ids))
        if not self.rejected_ids:
            raise ValueError("rejected_ids must be non-empty")
        if not self.reason.strip():
            raise ValueError("rejection reason must be non-empty")
        if self.scope not in ("main", "sub"):
            raise ValueError(f"scope must be main or sub, got {self.scope!r}")


@dataclass
class RoutingState:
    """Mutable per-episode routing state owned by the session."""

    query: str
    main_round: int = 1
    sub_round: int = 1
    rejected_main: set[str] = field(default_factory=set)
    rejected_sub: set[str] = field(default_factory=set)
    feedback_notes: list[str] = field(default_factory=list)
    confirmed_main: str | None = None
    confirmed_sub: str | None = None
    last_candidates: list[str] = field(default_factory=list)
    last_proposal: str | None = None


def parse_id_list(raw: str) -> list[str]:
    """Comma-separated ids out of model text; whitespace-tolerant."""
    return [part.strip() for part in raw.split(",") if part.strip()]


def repair_ids(
    raw_ids: list[str], known: set[str], rejected: set[str], limit: int
) -> list[str]:
    """Repair rules in fixed order: drop unknown/rejected, dedupe keep-first,
    truncate to ``limit``."""
    kept: list[str] = []
    for cand in raw_ids:
        if cand not in known or cand in rejected:
            continue
        if cand in kept:
            continue
        kept.append(cand)
    return kept[:limit]


def _routing_prompt(
    query: str,
    taxonomy: TaskTaxonomy,
    rejected: set[str],
    notes: list[str],
    language: Language,
) -> CompletionRequest:
    system = (
        "You select tasks for a design-software assistant. "
        "Reply with a comma-separated list of 1-3 task ids from this list, "
        "best match first, and nothing else.\n"
        + routing_digest(taxonomy, language)
    )
    if rejected:
        system += "\nAlready rejected (never return these): " + ", ".join(
            sorted(rejected)
        )
    user = query
    if notes:
        user += "\nDissatisfaction feedback: " + " | ".join(notes)
    return CompletionRequest(
        messages=(
            ChatMessage(Role.SYSTEM, system),
            ChatMessage(Role.USER, user),
        ),
        purpose_tag=PurposeTag.ROUTE_MAIN,
    )


def select_main(
    query: str,
    taxonomy: TaskTaxonomy,
    rejected: set[str],
    round: int,
    backend: Backend,
    *,
    language: Language = Language.EN,
    feedback_notes: list[str] | None = None,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> MainSelection:
    if not query.strip():
        raise ValueError("query must be non-empty")
    if round > max_rounds:
        raise RoundsExhausted(
            f"round {round} exceeds max_rounds={max_rounds}",
            round=round,
            max_rounds=max_rounds,
        )
    known = set(taxonomy.main_ids())
    if not known - rejected:
        raise NoCandidatesLeft("every main task has been rejected")

    notes = feedback_notes or []
    raw = backend.complete(_routing_prompt(query, taxonomy, rejected, notes, language))
    candidates = repair_ids(parse_id_list(raw), known, rejected, MAX_MAIN_CANDIDATES)
    if candidates:
        return MainSelection(tuple(candidates), rationale_text=raw.strip(), round=round)

    # Repair left nothing usable: deterministic lexical fallback, top 1.
    fallback_query = query if not notes else query + " " + " ".join(notes)
    ranking = rank_by_overlap(
        fallback_query,
        {
            task.id: f"{task.title_en} {task.title_zh} {task.description}"
            for task in taxonomy.main_tasks
            if task.id not in rejected
        },
    )
    top_id = ranking[0][0]
    return MainSelection(
        (top_id,),
        rationale_text=f"lexical fallback (model output unusable: {raw.strip()!r})",
        round=round,
    )


def _sub_prompt(
    main: MainTask, dialogue: list[ChatMessage], rejected: set[str], language: Language
) -> CompletionRequest:
    system = (
        f"You pick the single most suitable subtask of {main.id!r}. "
        "Reply with exactly one subtask id from this list and nothing else.\n"
        + subtask_digest(main, language)
    )
    if rejected:
        system += "\nAlready rejected (never return these): " + ", ".join(
            sorted(rejected)
        )
    return CompletionRequest(
        messages=(ChatMessage(Role.SYSTEM, system), *dialogue),
        purpose_tag=PurposeTag.ROUTE_SUB,
    )


def select_sub(
    main_id: str,
    dialogue: list[ChatMessage],
    taxonomy: TaskTaxonomy,
    rejected: set[str],
    backend: Backend,
    *,
    language: Language = Language.EN,
) -> SubSelection:
    main = taxonomy.main(main_id)
    own_ids = {sub.id for sub in main.subtasks}
    if not own_ids - rejected:
        raise NoCandidatesLeft(
            f"every subtask of {main_id!r} has been rejected", main_id=main_id
        )

    raw = backend.complete(_sub_prompt(main, dialogue, rejected, language))
    repaired = repair_ids(parse_id_list(raw), own_ids, rejected, limit=1)
    if repaired:
        return SubSelection(main_id, repaired[0], rationale_text=raw.strip())

    last_user = ""
    for msg in reversed(dialogue):
        if msg.role is Role.USER:
            last_user = msg.content
            break
    ranking = rank_by_overlap(
        last_user,
        {
            sub.id: f"{sub.title_en} {sub.title_zh} {sub.description}"
            for sub in main.subtasks
            if sub.id not in rejected
        },
    )
    return SubSelection(
        main_id,
        ranking[0][0],
        rationale_text=f"lexical fallback (model output unusable: {raw.strip()!r})",
    )


def apply_feedback(
    state: RoutingState,
    feedback: RejectionFeedback,
    *,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> RoutingState:
    """Fold a rejection into the episode: grow the rejected set, append the
    reason to future prompts, advance the round counter for that scope."""
    if feedback.scope == "main":
        next_round = state.main_round + 1
        if next_round > max_rounds:
            raise RoundsExhausted(
                f"main-task selection exhausted after {max_rounds} rounds",
                scope="main",
                max_rounds=max_rounds,
            )
        state.rejected_main |= set(feedback.rejected_ids)
        state.main_round = next_round
    else:
        next_round = state.sub_round + 1
        if next_round > max_rounds:
            raise RoundsExhausted(
                f"subtask selection exhausted after {max_rounds} rounds",
                scope="sub",
                max_rounds=max_rounds,
            )
        state.rejected_sub |= set(feedback.rejected_ids)
        state.sub_round = next_round
    state.feedback_notes.append(feedback.reason)
    return state

"""Conversation state machine binding routing, docs, QA, and execution.

Phases: idle -> routing_main -> routing_sub -> viewing_doc -> qa, with a
command detour (recommending -> eliciting -> executing) reachable from any
phase via a ``/do`` message and returning to where it started. Rejections
loop inside the routing phases; a QA bottleneck triggers chat-log
augmentation and offers a fresh routing episode. Sessions persist as one
JSON file each, written atomically.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from . import qa_engine, recommender, router
from .doc_corpus import DocumentCache, qa_context
from .errors import CorruptRecord, IllegalTransition, NoCandidatesLeft, NotFound, RoundsExhausted
from .executor import ElicitationForm, ExecutionLog, WorkspaceManager, elicit, execute
from .llm_gateway import Backend, ChatMessage, Role
from .plugin_registry import Registry
from .qa_engine import AugmentationStore, BottleneckSignal, QaExchange
from .recommender import Recommendation
from .router import RoutingState
from .taxonomy import TaskTaxonomy, lookup_subtask
from .types import Language, utc_now_rfc3339

SCHEMA_VERSION = 1
COMMAND_PREFIX = "/do "


class Phase(str, Enum):
    IDLE = "idle"
    ROUTING_MAIN = "routing_main"
    ROUTING_SUB = "routing_sub"
    VIEWING_DOC = "viewing_doc"
    QA = "qa"
    RECOMMENDING = "recommending"
    ELICITING = "eliciting"
    EXECUTING = "executing"


class EventKind(str, Enum):
    MESSAGE = "message"
    CONFIRM_MAIN = "confirm_main"
    CONFIRM_SUB = "confirm_sub"
    REJECT = "reject"
    CONFIRM_PLUGIN = "confirm_plugin"
    SUBMIT_ARGS = "submit_args"
    ACCEPT_REROUTE = "accept_reroute"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    text: str | None = None
    main_id: str | None = None
    subtask_id: str | None = None
    rejected_ids: tuple[str, ...] = ()
    reason: str | None = None
    plugin_id: str | None = None
    override: bool = False
    args: dict[str, Any] | None = None


@dataclass
class CommandState:
    need: str
    return_phase: Phase
    plugin_id: str | None = None


@dataclass
class Session:
    session_id: str
    language: Language
    phase: Phase = Phase.IDLE
    turns: list[ChatMessage] = field(default_factory=list)
    routing: RoutingState | None = None
    command: CommandState | None = None
    active_doc: str | None = None
    qa_history: list[QaExchange] = field(default_factory=list)
    recommendation: Recommendation | None = None
    created_at: str = ""
    updated_at: str = ""

    def dialogue(self) -> list[ChatMessage]:
        return list(self.turns)


# --- persistence ------------------------------------------------------------


def session_to_dict(session: Session) -> dict:
    routing = None
    if session.routing is not None:
        r = session.routing
        routing = {
            "query": r.query,
            "main_round": r.main_round,
            "sub_round": r.sub_round,
            "rejected_main": sorted(r.rejected_main),
            "rejected_sub": sorted(r.rejected_sub),
            "feedback_notes": list(r.feedback_notes),
            "confirmed_main": r.confirmed_main,
            "confirmed_sub": r.confirmed_sub,
            "last_candidates": list(r.last_candidates),
            "last_proposal": r.last_proposal,
        }
    command = None
    if session.command is not None:
        command = {
            "need": session.command.need,
            "return_phase": session.command.return_phase.value,
            "plugin_id": session.command.plugin_id,
        }
    recommendation = None
    if session.recommendation is not None:
        recommendation = {
            "ranked": [[pid, score] for pid, score in session.recommendation.ranked],
            "method": session.recommendation.method,
            "chosen": session.recommendation.chosen,
        }
    return {
        "schema": SCHEMA_VERSION,
        "session_id": session.session_id,
        "language": session.language.value,
        "phase": session.phase.value,
        "turns": [{"role": m.role.value, "content": m.content} for m in session.turns],
        "routing": routing,
        "command": command,
        "active_doc": session.active_doc,
        "qa_history": [
            {
                "question": e.question,
                "answer": e.answer,
                "cited_fragments": list(e.cited_fragments),
                "grounded": e.grounded,
                "timestamp": e.timestamp,
            }
            for e in session.qa_history
        ],
        "recommendation": recommendation,
        "created_at": session.created_at,
        "updated_at": session.updated_at,
    }


def session_from_dict(raw: dict) -> Session:
    try:
        if raw.get("schema") != SCHEMA_VERSION:
            raise CorruptRecord(
                f"unsupported session schema {raw.get('schema')!r}",
                schema=raw.get("schema"),
            )
        routing = None
        if raw["routing"] is not None:
            r = raw["routing"]
            routing = RoutingState(
                query=r["query"],
                main_round=r["main_round"],
                sub_round=r["sub_round"],
                rejected_main=set(r["rejected_main"]),
                rejected_sub=set(r["rejected_sub"]),
                feedback_notes=list(r["feedback_notes"]),
                confirmed_main=r["confirmed_main"],
                confirmed_sub=r["confirmed_sub"],
                last_candidates=list(r["last_candidates"]),
                last_proposal=r["last_proposal"],
            )
        command = None
        if raw["command"] is not None:
            command = CommandState(
                need=raw["command"]["need"],
                return_phase=Phase(raw["command"]["return_phase"]),
                plugin_id=raw["command"]["plugin_id"],
            )
        recommendation = None
        if raw["recommendation"] is not None:
            rec = raw["recommendation"]
            recommendation = Recommendation(
                ranked=tuple((pid, float(score)) for pid, score in rec["ranked"]),
                method=rec["method"],
                chosen=rec["chosen"],
            )
        return Session(
            session_id=raw["session_id"],
            language=Language(raw["language"]),
            phase=Phase(raw["phase"]),
            turns=[ChatMessage(Role(m["role"]), m["content"]) for m in raw["turns"]],
            routing=routing,
            command=command,
            active_doc=raw["active_doc"],
            qa_history=[
                QaExchange(
                    question=e["question"],
                    answer=e["answer"],
                    cited_fragments=tuple(e["cited_fragments"]),
                    grounded=e["grounded"],
                    timestamp=e["timestamp"],
                )
                for e in raw["qa_history"]
            ],
            recommendation=recommendation,
            created_at=raw["created_at"],
            updated_at=raw["updated_at"],
        )
    except CorruptRecord:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptRecord(f"malformed session record: {exc}") from exc


class SessionStore:
    """One JSON file per session under a data directory; atomic writes."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.json"

    def save(self, session: Session) -> None:
        path = self._path(session.session_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(session_to_dict(session), ensure_ascii=False, indent=2),
            encoding="utf-8",
        )
        tmp.replace(path)

    def load(self, session_id: str) -> Session:
        path = self._path(session_id)
        if not path.exists():
            raise NotFound(
                f"unknown session {session_id!r}", kind="session", id=session_id
            )
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError) as exc:
            raise CorruptRecord(
                f"session record {session_id} unreadable: {exc}",
                session_id=session_id,
            ) from exc
        return session_from_dict(raw)

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.json"))


# --- engine ---------------------------------------------------------------------


@dataclass
class EngineSettings:
    max_rounds: int = router.DEFAULT_MAX_ROUNDS
    top_k: int = recommender.DEFAULT_TOP_K
    recommend_method: str = recommender.METHOD_LLM
    ungrounded_streak: int = qa_engine.DEFAULT_UNGROUNDED_STREAK
    grounding_window: int = qa_engine.DEFAULT_GROUNDING_WINDOW
    grounding_min_fraction: float = qa_engine.DEFAULT_GROUNDING_MIN_FRACTION
    augment_max_notes: int = qa_engine.DEFAULT_MAX_NOTES
    exec_timeout_s: float = 30.0


class SessionEngine:
    """Drives sessions through the phase machine, invoking the other modules."""

    def __init__(
        self,
        taxonomy: TaskTaxonomy,
        doc_cache: DocumentCache,
        registry: Registry,
        backend: Backend,
        augmentation_store: AugmentationStore,
        workspaces: WorkspaceManager,
        execution_log: ExecutionLog,
        session_store: SessionStore | None = None,
        settings: EngineSettings | None = None,
        clock: Callable[[], str] = utc_now_rfc3339,
    ) -> None:
        self.taxonomy = taxonomy
        self.doc_cache = doc_cache
        self.registry = registry
        self.backend = backend
        self.augmentation_store = augmentation_store
        self.workspaces = workspaces
        self.execution_log = execution_log
        self.session_store = session_store
        self.settings = settings or EngineSettings()
        self.clock = clock
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # -- session lifecycle --

    def create_session(self, language: Language) -> Session:
        now = self.clock()
        session = Session(
            session_id="sess-" + uuid.uuid4().hex[:12],
            language=language,
            created_at=now,
            updated_at=now,
        )
        self._sessions[session.session_id] = session
        self._persist(session)
        return session

    def get_session(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is not None:
            return session
        if self.session_store is not None:
            session = self.session_store.load(session_id)
            self._sessions[session_id] = session
            return session
        raise NotFound(f"unknown session {session_id!r}", kind="session", id=session_id)

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _persist(self, session: Session) -> None:
        session.updated_at = self.clock()
        if self.session_store is not None:
            self.session_store.save(session)

    # -- event dispatch --

    def advance(self, session: Session, event: Event) -> list[dict]:
        """Apply one event; returns render effects. Illegal events raise
        without mutating the session."""
        handler = {
            EventKind.MESSAGE: self._on_message,
            EventKind.CONFIRM_MAIN: self._on_confirm_main,
            EventKind.CONFIRM_SUB: self._on_confirm_sub,
            EventKind.REJECT: self._on_reject,
            EventKind.CONFIRM_PLUGIN: self._on_confirm_plugin,
            EventKind.SUBMIT_ARGS: self._on_submit_args,
            EventKind.ACCEPT_REROUTE: self._on_accept_reroute,
        }[event.kind]
        effects = handler(session, event)
        self._persist(session)
        return effects

    def _on_message(self, session: Session, event: Event) -> list[dict]:
        text = (event.text or "").strip()
        if not text:
            raise IllegalTransition(session.phase.value, "empty message")
        if text.startswith(COMMAND_PREFIX):
            return self._start_command(session, text)
        if session.phase is Phase.IDLE:
            return self._start_episode(session, text)
        if session.phase in (Phase.VIEWING_DOC, Phase.QA):
            return self._ask(session, text)
        raise IllegalTransition(session.phase.value, "message")

    # -- routing --

    def _start_episode(self, session: Session, query: str) -> list[dict]:
        session.turns.append(ChatMessage(Role.USER, query))
        state = RoutingState(query=query)
        selection = router.select_main(
            query,
            self.taxonomy,
            rejected=set(state.rejected_main),
            round=state.main_round,
            backend=self.backend,
            language=session.language,
            feedback_notes=state.feedback_notes,
            max_rounds=self.settings.max_rounds,
        )
        state.last_candidates = list(selection.candidates)
        session.routing = state
        session.phase = Phase.ROUTING_MAIN
        return [self._candidates_effect(session, selection)]

    def _candidates_effect(
        self, session: Session, selection: router.MainSelection
    ) -> dict:
        rows = []
        for main_id in selection.candidates:
            task = self.taxonomy.main(main_id)
            rows.append(
                {
                    "id": main_id,
                    "title": task.title(session.language),
                    "description": task.description,
                }
            )
        return {
            "type": "candidates",
            "round": selection.round,
            "candidates": rows,
            "rationale": selection.rationale_text,
        }

    def _on_confirm_main(self, session: Session, event: Event) -> list[dict]:
        if session.phase is not Phase.ROUTING_MAIN or session.routing is None:
            raise IllegalTransition(session.phase.value, "confirm_main")
        main_id = event.main_id or ""
        if main_id not in session.routing.last_candidates:
            raise IllegalTransition(
                session.phase.value, f"confirm_main:{main_id or '<missing>'}"
            )
        session.routing.confirmed_main = main_id
        return self._propose_sub(session)

    def _propose_sub(self, session: Session) -> list[dict]:
        state = session.routing
        assert state is not None and state.confirmed_main is not None
        try:
            selection = router.select_sub(
                state.confirmed_main,
                session.dialogue(),
                self.taxonomy,
                rejected=set(state.rejected_sub),
                backend=self.backend,
                language=session.language,
            )
        except NoCandidatesLeft:
            session.phase = Phase.IDLE
            session.routing = None
            raise
        state.last_proposal = selection.subtask_id
        session.phase = Phase.ROUTING_SUB
        sub = lookup_subtask(self.taxonomy, selection.subtask_id)
        return [
            {
                "type": "sub_proposal",
                "main_id": selection.main_id,
                "subtask_id": selection.subtask_id,
                "title": sub.title(session.language),
                "description": sub.description,
                "rationale": selection.rationale_text,
            }
        ]

    def _on_confirm_sub(self, session: Session, event: Event) -> list[dict]:
        if session.phase is not Phase.ROUTING_SUB or session.routing is None:
            raise IllegalTransition(session.phase.value, "confirm_sub")
        state = session.routing
        subtask_id = event.subtask_id or state.last_proposal or ""
        sub = lookup_subtask(self.taxonomy, subtask_id)
        if sub.parent_id != state.confirmed_main:
            raise IllegalTransition(
                session.phase.value, f"confirm_sub:{subtask_id} (wrong main task)"
            )
        state.confirmed_sub = subtask_id
        fragment_ids: list[str] = []
        for frag in sub.fragment_ids:
            if frag not in fragment_ids:
                fragment_ids.append(frag)
        doc = self.doc_cache.get_or_stitch(
            fragment_ids, session.language, clock=self.clock
        )
        session.active_doc = doc.doc_id
        session.phase = Phase.VIEWING_DOC
        fragments = [
            {
                "id": fid,
                "title": self.doc_cache.store.get(fid, session.language).title,
            }
            for fid in doc.fragment_ids
        ]
        return [
            {
                "type": "document",
                "doc_id": doc.doc_id,
                "url": f"/docs/{doc.doc_id}",
                "fragments": fragments,
            }
        ]

    def _on_reject(self, session: Session, event: Event) -> list[dict]:
        if session.phase not in (Phase.ROUTING_MAIN, Phase.ROUTING_SUB):
            raise IllegalTransition(session.phase.value, "reject")
        state = session.routing
        assert state is not None
        scope = "main" if session.phase is Phase.ROUTING_MAIN else "sub"
        feedback = router.RejectionFeedback(
            rejected_ids=tuple(event.rejected_ids),
            reason=event.reason or "",
            scope=scope,
        )
        try:
            router.apply_feedback(state, feedback, max_rounds=self.settings.max_rounds)
            if scope == "main":
                selection = router.select_main(
                    state.query,
                    self.taxonomy,
                    rejected=set(state.rejected_main),
                    round=state.main_round,
                    backend=self.backend,
                    language=session.language,
                    feedback_notes=state.feedback_notes,
                    max_rounds=self.settings.max_rounds,
                )
                state.last_candidates = list(selection.candidates)
                return [self._candidates_effect(session, selection)]
            return self._propose_sub(session)
        except (RoundsExhausted, NoCandidatesLeft):
            # terminal for this episode: drop back to idle so the user can
            # start over
            session.phase = Phase.IDLE
            session.routing = None
            raise

    # -- QA --

    def _ask(self, session: Session, text: str) -> list[dict]:
        if session.active_doc is None:
            raise IllegalTransition(session.phase.value, "question (no active doc)")
        session.turns.append(ChatMessage(Role.USER, text))
        effects: list[dict] = []
        signal: BottleneckSignal | None
        if text.startswith(qa_engine.TOPIC_SHIFT_MARKER):
            session.phase = Phase.QA
            signal = qa_engine.detect_bottleneck(
                session.qa_history,
                text,
                ungrounded_streak=self.settings.ungrounded_streak,
                window=self.settings.grounding_window,
                min_fraction=self.settings.grounding_min_fraction,
            )
        else:
            doc = self.doc_cache.get(session.active_doc)
            context = qa_context(doc)
            exchange = qa_engine.answer(
                text,
                context,
                self.augmentation_store.records(),
                self.backend,
                clock=self.clock,
            )
            session.qa_history.append(exchange)
            session.turns.append(ChatMessage(Role.ASSISTANT, exchange.answer))
            session.phase = Phase.QA
            effects.append(
                {
                    "type": "answer",
                    "answer": exchange.answer,
                    "grounded": exchange.grounded,
                    "cited_fragments": list(exchange.cited_fragments),
                }
            )
            signal = qa_engine.detect_bottleneck(
                session.qa_history,
                text,
                ungrounded_streak=self.settings.ungrounded_streak,
                window=self.settings.grounding_window,
                min_fraction=self.settings.grounding_min_fraction,
            )
        if signal is not None:
            records = qa_engine.augment_from_log(
                session.dialogue(),
                self.backend,
                session_id=session.session_id,
                store=self.augmentation_store,
                topic_hint=signal.evidence,
                max_notes=self.settings.augment_max_notes,
                clock=self.clock,
            )
            effects.append(
                {
                    "type": "bottleneck",
                    "kind": signal.kind.value,
                    "evidence": signal.evidence,
                    "notes_added": len(records),
                    "offer": "reroute",
                }
            )
        return effects

    def _on_accept_reroute(self, session: Session, event: Event) -> list[dict]:
        if session.phase is not Phase.QA:
            raise IllegalTransition(session.phase.value, "accept_reroute")
        text = (event.text or "").strip()
        if text.startswith(qa_engine.TOPIC_SHIFT_MARKER):
            text = text[len(qa_engine.TOPIC_SHIFT_MARKER):].strip()
        if not text:
            raise IllegalTransition(session.phase.value, "accept_reroute (no query)")
        # fresh episode: the topic changed, prior rejections are stale
        session.routing = None
        session.active_doc = None
        session.recommendation = None
        return self._start_episode(session, text)

    # -- command detour --

    def _start_command(self, session: Session, text: str) -> list[dict]:
        session.turns.append(ChatMessage(Role.USER, text))
        command_text = text[len(COMMAND_PREFIX):].strip()
        if not command_text:
            raise IllegalTransition(session.phase.value, "empty command")
        need = command_text
        if session.routing is not None and session.routing.confirmed_sub:
            sub = lookup_subtask(self.taxonomy, session.routing.confirmed_sub)
            need = f"{command_text} {sub.title(session.language)}"
        return_phase = (
            session.command.return_phase if session.command else session.phase
        )
        recommendation = recommender.recommend(
            need,
            self.registry,
            backend=self.backend,
            method=self.settings.recommend_method,
            top_k=self.settings.top_k,
        )
        session.command = CommandState(need=need, return_phase=return_phase)
        session.recommendation = recommendation
        session.phase = Phase.RECOMMENDING
        return [
            {
                "type": "recommendation",
                "need": need,
                "method": recommendation.method,
                "ranked": [
                    {"plugin_id": pid, "score": score}
                    for pid, score in recommendation.ranked
                ],
            }
        ]

    def _on_confirm_plugin(self, session: Session, event: Event) -> list[dict]:
        if session.phase is not Phase.RECOMMENDING or session.command is None:
            raise IllegalTransition(session.phase.value, "confirm_plugin")
        if session.recommendation is None:
            raise IllegalTransition(session.phase.value, "confirm_plugin")
        plugin_id = event.plugin_id or ""
        manifest = self.registry.get(plugin_id)
        session.recommendation = recommender.confirm(
            session.recommendation, plugin_id, override=event.override
        )
        session.command.plugin_id = plugin_id
        session.phase = Phase.ELICITING
        form = elicit(manifest)
        return [self._form_effect(form)]

    @staticmethod
    def _form_effect(form: ElicitationForm) -> dict:
        return {
            "type": "elicitation",
            "plugin_id": form.plugin_id,
            "prompts": [
                {
                    "name": p.name,
                    "kind": p.kind,
                    "required": p.required,
                    "default": p.default,
                    "allowed_values": list(p.allowed_values) if p.allowed_values else None,
                    "unit": p.unit,
                    "description": p.description,
                }
                for p in form.prompts
            ],
            "examples": [
                {"values": dict(e.values), "caption": e.caption} for e in form.examples
            ],
        }

    def _on_submit_args(self, session: Session, event: Event) -> list[dict]:
        if session.phase is not Phase.ELICITING or session.command is None:
            raise IllegalTransition(session.phase.value, "submit_args")
        plugin_id = session.command.plugin_id
        if not plugin_id:
            raise IllegalTransition(session.phase.value, "submit_args (no plugin)")
        session.phase = Phase.EXECUTING
        workspace = self.workspaces.get(session.session_id)
        record = execute(
            plugin_id,
            event.args or {},
            self.registry,
            workspace,
            log=self.execution_log,
            timeout_s=self.settings.exec_timeout_s,
            clock=self.clock,
        )
        self.workspaces.save(workspace)
        if record.outcome == "rejected":
            session.phase = Phase.ELICITING  # let the user fix the arguments
        else:
            session.phase = session.command.return_phase
            session.command = None
        return [
            {
                "type": "execution",
                "exec_id": record.exec_id,
                "plugin_id": record.plugin_id,
                "outcome": record.outcome,
                "changed": len(record.diff),
                "workspace_version": record.workspace_version,
                "stdout_excerpt": record.stdout_excerpt,
                "error": record.error,
            }
        ]

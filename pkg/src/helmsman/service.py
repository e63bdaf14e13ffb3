"""HTTP JSON API over the session engine.

Endpoints (all JSON unless noted):

    POST /sessions                      create a session
    GET  /sessions/{id}                 session view
    POST /sessions/{id}/message         drive the conversation state machine
    POST /sessions/{id}/execute         submit arguments for the elicited plugin
    GET  /docs/{doc_id}                 tailored document (HTML)
    GET  /docs/{doc_id}/assets/{name}   document asset
    GET  /plugins                       plugin listing
    POST /plugins                       register a user-defined plugin
    GET  /executions/{exec_id}          execution record
    GET  /workspace/{id}                serialized workspace state + version

Engine errors surface verbatim as ``{code, message, details}``; a second
concurrent request on one session gets 409.
"""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .errors import EngineError, NotFound, SessionBusy
from .executor import elicit, serialize_workspace
from .plugin_registry import (
    BindingKind,
    ExecutorBinding,
    InputExample,
    ParamKind,
    ParameterSpec,
    PluginManifest,
    PluginOrigin,
    list_plugins,
)
from .session import Event, EventKind, Phase, Session, SessionEngine, session_to_dict
from .types import Language

_STATUS_BY_CODE = {
    "not_found": 404,
    "doc_not_found": 404,
    "parse_error": 422,
    "invalid_manifest": 422,
    "missing_required": 422,
    "type_mismatch": 422,
    "unknown_argument": 422,
    "enum_violation": 422,
    "validation_failed": 422,
    "session_busy": 409,
    "illegal_transition": 409,
    "duplicate_bundled": 409,
    "already_chosen": 409,
    "backend_unavailable": 503,
    "script_miss": 500,
}


class CreateSessionBody(BaseModel):
    language: str = "en"


class MessageBody(BaseModel):
    text: str | None = None
    event: str | None = None
    main_id: str | None = None
    subtask_id: str | None = None
    rejected_ids: list[str] = Field(default_factory=list)
    reason: str | None = None
    plugin_id: str | None = None
    override: bool = False
    args: dict[str, Any] | None = None


class ExecuteBody(BaseModel):
    plugin_id: str | None = None
    args: dict[str, Any] = Field(default_factory=dict)


class ParameterBody(BaseModel):
    name: str
    kind: str
    required: bool = False
    default: str | None = None
    allowed_values: list[str] | None = None
    unit: str | None = None
    description: str = ""


class ExampleBody(BaseModel):
    values: dict[str, str] = Field(default_factory=dict)
    caption: str = ""


class BindingBody(BaseModel):
    kind: str = "builtin_sim"
    command: str | None = None


class ManifestBody(BaseModel):
    plugin_id: str
    display_name: str
    description: str
    parameters: list[ParameterBody] = Field(default_factory=list)
    input_examples: list[ExampleBody] = Field(default_factory=list)
    binding: BindingBody = Field(default_factory=BindingBody)
    idempotent: bool = True


def manifest_from_body(body: ManifestBody) -> PluginManifest:
    from .errors import InvalidManifest

    errors: list[str] = []
    params = []
    for p in body.parameters:
        try:
            kind = ParamKind(p.kind)
        except ValueError:
            errors.append(f"param {p.name!r}: unknown kind {p.kind!r}")
            continue
        params.append(
            ParameterSpec(
                name=p.name,
                kind=kind,
                required=p.required,
                default=p.default,
                allowed_values=tuple(p.allowed_values) if p.allowed_values else None,
                unit=p.unit,
                description=p.description,
            )
        )
    try:
        binding_kind = BindingKind(body.binding.kind)
    except ValueError:
        errors.append(f"unknown binding kind {body.binding.kind!r}")
        binding_kind = BindingKind.BUILTIN_SIM
    if errors:
        raise InvalidManifest(errors)
    return PluginManifest(
        plugin_id=body.plugin_id,
        display_name=body.display_name,
        description=body.description,
        parameters=tuple(params),
        input_examples=tuple(
            InputExample(values=dict(e.values), caption=e.caption)
            for e in body.input_examples
        ),
        binding=ExecutorBinding(kind=binding_kind, command=body.binding.command),
        idempotent=body.idempotent,
        origin=PluginOrigin.USER_DEFINED,
    )


def session_view(engine: SessionEngine, session: Session) -> dict:
    view = session_to_dict(session)
    view["doc_url"] = f"/docs/{session.active_doc}" if session.active_doc else None
    workspace = engine.workspaces.get(session.session_id)
    view["workspace_version"] = workspace.version
    if session.phase is Phase.ELICITING and session.command and session.command.plugin_id:
        form = elicit(engine.registry.get(session.command.plugin_id))
        view["elicitation"] = SessionEngine._form_effect(form)
    else:
        view["elicitation"] = None
    return view


def create_app(engine: SessionEngine) -> FastAPI:
    app = FastAPI(title="helmsman", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(EngineError)
    async def engine_error_handler(_request: Request, exc: EngineError) -> JSONResponse:
        status = _STATUS_BY_CODE.get(exc.code, 400)
        return JSONResponse(status_code=status, content=exc.to_dict())

    def _advance_locked(session_id: str, event: Event) -> dict:
        lock = engine.session_lock(session_id)
        if not lock.acquire(blocking=False):
            raise SessionBusy(
                f"session {session_id} already has a request in flight",
                session_id=session_id,
            )
        try:
            session = engine.get_session(session_id)
            effects = engine.advance(session, event)
            return {"session": session_view(engine, session), "effects": effects}
        finally:
            lock.release()

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict:
        try:
            language = Language(body.language)
        except ValueError:
            raise NotFound(
                f"unsupported language {body.language!r}",
                kind="language",
                id=body.language,
            ) from None
        session = engine.create_session(language)
        return {"session_id": session.session_id, "session": session_view(engine, session)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        return {"session": session_view(engine, engine.get_session(session_id))}

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, body: MessageBody) -> dict:
        kind = EventKind(body.event) if body.event else EventKind.MESSAGE
        event = Event(
            kind=kind,
            text=body.text,
            main_id=body.main_id,
            subtask_id=body.subtask_id,
            rejected_ids=tuple(body.rejected_ids),
            reason=body.reason,
            plugin_id=body.plugin_id,
            override=body.override,
            args=body.args,
        )
        return _advance_locked(session_id, event)

    @app.post("/sessions/{session_id}/execute")
    def post_execute(session_id: str, body: ExecuteBody) -> dict:
        session = engine.get_session(session_id)
        if (
            body.plugin_id
            and session.command
            and session.command.plugin_id
            and body.plugin_id != session.command.plugin_id
        ):
            from .errors import IllegalTransition

            raise IllegalTransition(session.phase.value, f"execute:{body.plugin_id}")
        event = Event(kind=EventKind.SUBMIT_ARGS, args=body.args)
        return _advance_locked(session_id, event)

    @app.get("/docs/{doc_id}")
    def get_doc(doc_id: str) -> Response:
        doc = engine.doc_cache.get(doc_id)
        return Response(content=doc.html, media_type="text/html; charset=utf-8")

    @app.get("/docs/{doc_id}/assets/{name}")
    def get_doc_asset(doc_id: str, name: str) -> Response:
        data = engine.doc_cache.asset(doc_id, name)
        media = "image/png" if name.endswith(".png") else "application/octet-stream"
        return Response(content=data, media_type=media)

    @app.get("/plugins")
    def get_plugins() -> dict:
        rows = list_plugins(engine.registry)
        return {
            "plugins": [
                {"plugin_id": pid, "display_name": name, "description": desc}
                for pid, name, desc in rows
            ],
            "registry_version": engine.registry.version,
        }

    @app.post("/plugins", status_code=201)
    def post_plugin(body: ManifestBody) -> dict:
        manifest = manifest_from_body(body)
        engine.registry.register(manifest)
        return {
            "plugin_id": manifest.plugin_id,
            "registry_version": engine.registry.version,
        }

    @app.get("/executions/{exec_id}")
    def get_execution(exec_id: str) -> dict:
        record = engine.execution_log.find(exec_id)
        if record is None:
            raise NotFound(f"unknown execution {exec_id!r}", kind="execution", id=exec_id)
        return {"execution": record.to_dict()}

    @app.get("/workspace/{workspace_id}")
    def get_workspace(workspace_id: str) -> dict:
        workspace = engine.workspaces.get(workspace_id)
        return {
            "workspace_id": workspace_id,
            "version": workspace.version,
            "dirty": workspace.dirty,
            "items": len(workspace.items),
            "serialized": serialize_workspace(workspace),
        }

    return app

"""Plugin execution against a versioned simulated design workspace.

The workspace is a neutral serialized file of design items (tracks, pads,
footprints, text) standing in for a live board document, so plugin effects
are observable and testable. Executions either apply cleanly (version
bumps by one) or leave the serialization byte-identical; a linear snapshot
stack backs rollback. Subprocess plugins run inside a throwaway jail
directory with a scrubbed environment and a Python I/O guard that denies
file access outside the jail.
"""

from __future__ import annotations

import copy
import json
import os
import re
import shlex
import shutil
import subprocess
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from .errors import (
    EngineError,
    EnumViolation,
    ExecutionTimeout,
    MissingRequired,
    ParseError,
    SubprocessFailed,
    TypeMismatch,
    UnknownArgument,
    UnknownSnapshot,
    ValidationFailed,
)
from .plugin_registry import (
    BindingKind,
    InputExample,
    ParameterSpec,
    PluginManifest,
    Registry,
    validate_arguments,
)
from .types import utc_now_rfc3339

DEFAULT_TIMEOUT_S = 30.0
STDOUT_EXCERPT_CHARS = 2000


class ItemKind(str, Enum):
    TRACK = "track"
    PAD = "pad"
    FOOTPRINT = "footprint"
    TEXT = "text"


@dataclass
class Item:
    kind: ItemKind
    properties: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.kind, ItemKind):
            self.kind = ItemKind(self.kind)
        for key, value in self.properties.items():
            if key == "kind":
                raise ValueError("property name 'kind' is reserved")
            if "\n" in key or "\n" in str(value) or "=" in key:
                raise ValueError(f"property {key!r} must be single-line, no '='")
            if not isinstance(value, str):
                raise ValueError(f"property {key!r} must be a string")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "properties": dict(self.properties)}

    @classmethod
    def from_dict(cls, raw: dict) -> "Item":
        return cls(kind=ItemKind(raw["kind"]), properties=dict(raw["properties"]))


class Workspace:
    """Items plus a monotonic version; one execution at a time per workspace."""

    def __init__(
        self,
        workspace_id: str = "main",
        items: dict[str, Item] | None = None,
        version: int = 0,
        dirty: bool = False,
    ) -> None:
        self.workspace_id = workspace_id
        self.items: dict[str, Item] = items or {}
        self.version = version
        self.dirty = dirty
        self.lock = threading.Lock()
        self._snapshots: list[tuple[str, str]] = []

    def snapshot(self) -> str:
        token = f"snap-{len(self._snapshots)}-{uuid.uuid4().hex[:8]}"
        self._snapshots.append((token, serialize_workspace(self)))
        return token

    def rollback(self, token: str) -> None:
        """Restore the snapshot byte-for-byte; snapshots taken after it are
        invalidated (linear history)."""
        for index, (known, payload) in enumerate(self._snapshots):
            if known == token:
                restored = parse_workspace(payload, workspace_id=self.workspace_id)
                self.items = restored.items
                self.version = restored.version
                self.dirty = restored.dirty
                del self._snapshots[index + 1:]
                return
        raise UnknownSnapshot(f"unknown snapshot token {token!r}", token=token)


def serialize_workspace(workspace: Workspace) -> str:
    """Deterministic text form: items sorted by id, properties sorted by name."""
    lines = [
        "[workspace]",
        f"version = {workspace.version}",
        f"dirty = {'true' if workspace.dirty else 'false'}",
    ]
    for item_id in sorted(workspace.items):
        item = workspace.items[item_id]
        lines.append("")
        lines.append(f"[item {item_id}]")
        lines.append(f"kind = {item.kind.value}")
        for key in sorted(item.properties):
            lines.append(f"{key} = {item.properties[key]}")
    return "\n".join(lines) + "\n"


def parse_workspace(text: str, workspace_id: str = "main") -> Workspace:
    items: dict[str, Item] = {}
    version = 0
    dirty = False
    current: str | None = None
    props: dict[str, str] = {}
    kind: str | None = None

    def close_item(line_no: int) -> None:
        nonlocal current, props, kind
        if current is None:
            return
        if kind is None:
            raise ParseError(f"item {current!r} missing kind", line=line_no)
        try:
            items[current] = Item(kind=ItemKind(kind), properties=props)
        except ValueError as exc:
            raise ParseError(f"item {current!r}: {exc}", line=line_no) from exc
        current, props, kind = None, {}, None

    section = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            close_item(line_no)
            header = stripped[1:-1].strip()
            if header == "workspace":
                section = "workspace"
            elif header.startswith("item "):
                section = "item"
                current = header[len("item "):].strip()
                if not current:
                    raise ParseError(f"line {line_no}: empty item id", line=line_no)
                if current in items:
                    raise ParseError(
                        f"line {line_no}: duplicate item {current!r}", line=line_no
                    )
            else:
                raise ParseError(
                    f"line {line_no}: unknown section [{header}]", line=line_no
                )
            continue
        if "=" not in stripped:
            raise ParseError(f"line {line_no}: expected key = value", line=line_no)
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if section == "workspace":
            if key == "version":
                try:
                    version = int(value)
                except ValueError as exc:
                    raise ParseError(
                        f"line {line_no}: version must be an integer", line=line_no
                    ) from exc
            elif key == "dirty":
                dirty = value.lower() == "true"
            else:
                raise ParseError(
                    f"line {line_no}: unknown workspace key {key!r}", line=line_no
                )
        elif section == "item":
            if key == "kind":
                kind = value
            else:
                props[key] = value
        else:
            raise ParseError(f"line {line_no}: content before any section", line=line_no)
    close_item(line_no=-1)
    return Workspace(workspace_id=workspace_id, items=items, version=version, dirty=dirty)


# --- diffs ------------------------------------------------------------------


@dataclass(frozen=True)
class DiffEntry:
    item_id: str
    change: str  # added | removed | changed
    before: dict | None
    after: dict | None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "change": self.change,
            "before": self.before,
            "after": self.after,
        }


def diff_items(before: dict[str, Item], after: dict[str, Item]) -> list[DiffEntry]:
    entries: list[DiffEntry] = []
    for item_id in sorted(set(before) | set(after)):
        old = before.get(item_id)
        new = after.get(item_id)
        if old is None and new is not None:
            entries.append(DiffEntry(item_id, "added", None, new.to_dict()))
        elif old is not None and new is None:
            entries.append(DiffEntry(item_id, "removed", old.to_dict(), None))
        elif old is not None and new is not None and old.to_dict() != new.to_dict():
            entries.append(DiffEntry(item_id, "changed", old.to_dict(), new.to_dict()))
    return entries


def apply_diff(items: dict[str, Item], diff: list[DiffEntry]) -> dict[str, Item]:
    """Replay a recorded diff onto a pre-state; returns the post-state."""
    result = {item_id: copy.deepcopy(item) for item_id, item in items.items()}
    for entry in diff:
        if entry.change == "removed":
            result.pop(entry.item_id, None)
        else:
            result[entry.item_id] = Item.from_dict(entry.after)  # type: ignore[arg-type]
    return result


# --- elicitation ---------------------------------------------------------------


@dataclass(frozen=True)
class ParamPrompt:
    name: str
    kind: str
    required: bool
    default: str | None
    allowed_values: tuple[str, ...] | None
    unit: str | None
    description: str


@dataclass(frozen=True)
class ElicitationForm:
    plugin_id: str
    prompts: tuple[ParamPrompt, ...]
    examples: tuple[InputExample, ...]


def elicit(manifest: PluginManifest) -> ElicitationForm:
    """One prompt per parameter, manifest order; input examples verbatim."""
    prompts = tuple(
        ParamPrompt(
            name=spec.name,
            kind=spec.kind.value,
            required=spec.required,
            default=spec.default,
            allowed_values=spec.allowed_values,
            unit=spec.unit,
            description=spec.description,
        )
        for spec in manifest.parameters
    )
    return ElicitationForm(
        plugin_id=manifest.plugin_id,
        prompts=prompts,
        examples=manifest.input_examples,
    )


# --- built-in simulated effects ----------------------------------------------

# An effect takes (items, normalized args) and returns (new items, stdout).
Effect = Callable[[dict[str, Item], dict[str, Any]], tuple[dict[str, Item], str]]


def _effect_round_tracker(
    items: dict[str, Item], args: dict[str, Any]
) -> tuple[dict[str, Item], str]:
    new_items = {iid: copy.deepcopy(item) for iid, item in items.items()}
    radius = str(args.get("radius-mil", 10))
    touched = 0
    for item in new_items.values():
        if item.kind is ItemKind.TRACK:
            if (
                item.properties.get("corner_style") != "rounded"
                or item.properties.get("corner_radius_mil") != radius
            ):
                touched += 1
            item.properties["corner_style"] = "rounded"
            item.properties["corner_radius_mil"] = radius
    return new_items, f"rounded corners on {touched} tracks"


def _effect_teardrop(
    items: dict[str, Item], args: dict[str, Any]
) -> tuple[dict[str, Item], str]:
    new_items = {iid: copy.deepcopy(item) for iid, item in items.items()}
    ratio = str(args.get("ratio", 0.5))
    touched = 0
    for item in new_items.values():
        if item.kind is ItemKind.PAD:
            if item.properties.get("teardrop") != "yes":
                touched += 1
            item.properties["teardrop"] = "yes"
            item.properties["teardrop_ratio"] = ratio
    return new_items, f"added teardrops to {touched} pads"


def _effect_bom_export(
    items: dict[str, Item], args: dict[str, Any]
) -> tuple[dict[str, Item], str]:
    count = sum(1 for item in items.values() if item.kind is ItemKind.FOOTPRINT)
    fmt = args.get("format", "csv")
    return (
        {iid: copy.deepcopy(item) for iid, item in items.items()},
        f"exported {count} components as {fmt}",
    )


def _effect_add_label(
    items: dict[str, Item], args: dict[str, Any]
) -> tuple[dict[str, Item], str]:
    new_items = {iid: copy.deepcopy(item) for iid, item in items.items()}
    seq = 1
    while f"label-{seq}" in new_items:
        seq += 1
    label_id = f"label-{seq}"
    new_items[label_id] = Item(
        kind=ItemKind.TEXT,
        properties={
            "content": str(args["text"]),
            "x_mil": str(args.get("x-mil", 0)),
            "y_mil": str(args.get("y-mil", 0)),
        },
    )
    return new_items, f"placed {label_id}"


BUILTIN_EFFECTS: dict[str, Effect] = {
    "round-tracker": _effect_round_tracker,
    "teardrop": _effect_teardrop,
    "bom-export": _effect_bom_export,
    "add-label": _effect_add_label,
}


# --- execution records -----------------------------------------------------------


@dataclass(frozen=True)
class ExecutionRecord:
    exec_id: str
    plugin_id: str
    args: dict[str, Any]
    started_at: str
    finished_at: str
    outcome: str  # ok | failed | rejected
    diff: tuple[DiffEntry, ...]
    stdout_excerpt: str
    error: dict | None = None
    workspace_version: int = 0

    def to_dict(self) -> dict:
        return {
            "exec_id": self.exec_id,
            "plugin_id": self.plugin_id,
            "args": self.args,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outcome": self.outcome,
            "diff": [entry.to_dict() for entry in self.diff],
            "stdout_excerpt": self.stdout_excerpt,
            "error": self.error,
            "workspace_version": self.workspace_version,
        }


class ExecutionLog:
    """Append-only execution journal (JSONL, RFC 3339 timestamps)."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self.records: list[ExecutionRecord] = []
        self._lock = threading.Lock()

    def append(self, record: ExecutionRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    def find(self, exec_id: str) -> ExecutionRecord | None:
        with self._lock:
            for record in self.records:
                if record.exec_id == exec_id:
                    return record
        return None


# --- subprocess jail ----------------------------------------------------------------

_JAIL_GUARD = '''\
# Auto-generated working-directory jail guard (loaded via PYTHONPATH).
import builtins, io, os, sys

_ROOT = os.path.realpath(os.environ.get("HELMSMAN_JAIL_ROOT", os.getcwd()))
_READ_PREFIXES = [_ROOT + os.sep]
for _p in {sys.prefix, sys.base_prefix, sys.exec_prefix}:
    _READ_PREFIXES.append(os.path.realpath(_p) + os.sep)

def _real(path):
    return os.path.realpath(os.fspath(path))

def _inside_root(path):
    real = _real(path)
    return real == _ROOT or real.startswith(_ROOT + os.sep)

def _readable(path):
    real = _real(path)
    if real == _ROOT or real == os.devnull:
        return True
    return any(real.startswith(p) for p in _READ_PREFIXES)

def _deny(path):
    raise PermissionError("jail: access outside working directory: %r" % (path,))

_real_open = builtins.open

def _guarded_open(file, mode="r", *a, **k):
    if isinstance(file, int):
        return _real_open(file, mode, *a, **k)
    writing = any(c in mode for c in "wax+")
    if writing and not _inside_root(file):
        _deny(file)
    if not writing and not _readable(file):
        _deny(file)
    return _real_open(file, mode, *a, **k)

builtins.open = _guarded_open
io.open = _guarded_open

_real_os_open = os.open
_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_APPEND | os.O_CREAT | os.O_TRUNC

def _guarded_os_open(path, flags, *a, **k):
    if flags & _WRITE_FLAGS:
        if not _inside_root(path):
            _deny(path)
    elif not _readable(path):
        _deny(path)
    return _real_os_open(path, flags, *a, **k)

os.open = _guarded_os_open

def _guard_one(name):
    real = getattr(os, name)
    def guarded(path, *a, **k):
        if not _inside_root(path):
            _deny(path)
        return real(path, *a, **k)
    setattr(os, name, guarded)

for _name in ("remove", "unlink", "rmdir", "mkdir", "truncate"):
    _guard_one(_name)

def _guard_two(name):
    real = getattr(os, name)
    def guarded(src, dst, *a, **k):
        if not (_inside_root(src) and _inside_root(dst)):
            _deny((src, dst))
        return real(src, dst, *a, **k)
    setattr(os, name, guarded)

for _name in ("rename", "replace", "link", "symlink"):
    _guard_two(_name)
'''


def substitute_command(template: str, args: dict[str, Any]) -> list[str]:
    """Split the template into argv, then substitute {name} placeholders.

    Substitution happens after splitting, so argument values can never
    introduce new argv tokens (shell-safe by construction; no shell runs).
    """
    argv: list[str] = []
    for token in shlex.split(template):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in args:
                raise ValidationFailed(
                    f"command placeholder {{{name}}} has no argument", name=name
                )
            return arg_text(args[name])
        argv.append(re.sub(r"\{([a-z0-9_-]+)\}", repl, token))
    return argv


def arg_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _jail_env(jail: Path, workspace_file: Path) -> dict[str, str]:
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "LANG": os.environ.get("LANG", "C.UTF-8"),
        "HOME": str(jail / "home"),
        "TMPDIR": str(jail / "tmp"),
        "PYTHONPATH": str(jail),
        "PYTHONDONTWRITEBYTECODE": "1",
        "WORKSPACE_FILE": str(workspace_file),
        "HELMSMAN_JAIL_ROOT": str(jail),
    }
    return env


# --- execute -----------------------------------------------------------------------


def execute(
    plugin_id: str,
    args: dict[str, Any],
    registry: Registry,
    workspace: Workspace,
    *,
    effects: dict[str, Effect] | None = None,
    jail_parent: str | Path | None = None,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    log: ExecutionLog | None = None,
    clock: Callable[[], str] = utc_now_rfc3339,
) -> ExecutionRecord:
    """Validate, dispatch, and apply one plugin execution.

    Failed and rejected executions leave the workspace serialization
    byte-identical to its pre-call state; ok executions with effects bump
    the version by exactly one.
    """
    manifest = registry.get(plugin_id)
    effects = effects if effects is not None else BUILTIN_EFFECTS
    started = clock()
    exec_id = "exec-" + uuid.uuid4().hex[:12]

    def finish(
        outcome: str,
        diff: list[DiffEntry],
        stdout: str,
        error: EngineError | None,
        normalized: dict[str, Any],
    ) -> ExecutionRecord:
        record = ExecutionRecord(
            exec_id=exec_id,
            plugin_id=plugin_id,
            args=normalized,
            started_at=started,
            finished_at=clock(),
            outcome=outcome,
            diff=tuple(diff),
            stdout_excerpt=stdout[:STDOUT_EXCERPT_CHARS],
            error=error.to_dict() if error else None,
            workspace_version=workspace.version,
        )
        if log is not None:
            log.append(record)
        return record

    with workspace.lock:
        try:
            normalized = validate_arguments(manifest, args)
        except (MissingRequired, TypeMismatch, UnknownArgument, EnumViolation) as exc:
            wrapped = ValidationFailed(str(exc), cause=exc.to_dict())
            return finish("rejected", [], "", wrapped, dict(args))

        pre_serialized = serialize_workspace(workspace)
        pre_items = {iid: copy.deepcopy(item) for iid, item in workspace.items.items()}

        if manifest.binding.kind is BindingKind.BUILTIN_SIM:
            effect = effects.get(plugin_id)
            if effect is None:
                error = EngineError(
                    f"no builtin effect bound for plugin {plugin_id!r}"
                )
                error.code = "no_builtin_effect"
                return finish("failed", [], "", error, normalized)
            try:
                new_items, stdout = effect(pre_items, normalized)
            except Exception as exc:  # noqa: BLE001 - effect crash is a failed run
                error = EngineError(f"builtin effect crashed: {exc}")
                error.code = "effect_failed"
                return finish("failed", [], "", error, normalized)
        else:
            result = _run_jailed(
                manifest, normalized, pre_serialized, workspace, jail_parent, timeout_s
            )
            if isinstance(result, EngineError):
                restored = parse_workspace(pre_serialized, workspace.workspace_id)
                workspace.items = restored.items
                workspace.version = restored.version
                workspace.dirty = restored.dirty
                return finish("failed", [], "", result, normalized)
            new_items, stdout = result

        diff = diff_items(workspace.items, new_items)
        if diff or not manifest.idempotent:
            workspace.items = new_items
            workspace.version += 1
            workspace.dirty = True
        return finish("ok", diff, stdout, None, normalized)


def _run_jailed(
    manifest: PluginManifest,
    normalized: dict[str, Any],
    pre_serialized: str,
    workspace: Workspace,
    jail_parent: str | Path | None,
    timeout_s: float,
) -> tuple[dict[str, Item], str] | EngineError:
    """Run a subprocess plugin inside a fresh jail; returns new items or the
    failure to attach."""
    jail = Path(tempfile.mkdtemp(prefix="helmsman-jail-", dir=jail_parent))
    try:
        (jail / "home").mkdir()
        (jail / "tmp").mkdir()
        (jail / "sitecustomize.py").write_text(_JAIL_GUARD, encoding="utf-8")
        workspace_file = jail / "workspace.txt"
        workspace_file.write_text(pre_serialized, encoding="utf-8")
        try:
            argv = substitute_command(manifest.binding.command or "", normalized)
        except ValidationFailed as exc:
            return exc
        try:
            proc = subprocess.run(
                argv,
                cwd=jail,
                env=_jail_env(jail, workspace_file),
                capture_output=True,
                text=True,
                timeout=timeout_s,
            )
        except subprocess.TimeoutExpired:
            return ExecutionTimeout(
                f"plugin {manifest.plugin_id!r} exceeded {timeout_s:g}s",
                timeout_s=timeout_s,
            )
        except OSError as exc:
            return SubprocessFailed(f"cannot launch {argv[0]!r}: {exc}", argv=argv)
        if proc.returncode != 0:
            return SubprocessFailed(
                f"plugin {manifest.plugin_id!r} exited {proc.returncode}",
                exit_code=proc.returncode,
                stderr_excerpt=proc.stderr[-STDOUT_EXCERPT_CHARS:],
            )
        try:
            rewritten = parse_workspace(
                workspace_file.read_text(encoding="utf-8"), workspace.workspace_id
            )
        except (ParseError, OSError) as exc:
            return SubprocessFailed(
                f"plugin {manifest.plugin_id!r} left an unreadable workspace: {exc}"
            )
        return rewritten.items, proc.stdout
    finally:
        shutil.rmtree(jail, ignore_errors=True)


# --- workspace manager ---------------------------------------------------------------


class WorkspaceManager:
    """One workspace per id, persisted as a file; distinct ids run concurrently.

    New workspaces start as a copy of ``template`` when one is set.
    """

    def __init__(
        self,
        directory: str | Path | None = None,
        template: Workspace | None = None,
    ) -> None:
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.template = template
        self._workspaces: dict[str, Workspace] = {}
        self._lock = threading.Lock()

    def get(self, workspace_id: str, *, template: Workspace | None = None) -> Workspace:
        template = template or self.template
        with self._lock:
            workspace = self._workspaces.get(workspace_id)
            if workspace is not None:
                return workspace
            path = self._path(workspace_id)
            if path and path.exists():
                workspace = parse_workspace(
                    path.read_text(encoding="utf-8"), workspace_id
                )
            elif template is not None:
                workspace = parse_workspace(serialize_workspace(template), workspace_id)
            else:
                workspace = Workspace(workspace_id)
            self._workspaces[workspace_id] = workspace
            return workspace

    def save(self, workspace: Workspace) -> None:
        path = self._path(workspace.workspace_id)
        if not path:
            return
        workspace.dirty = False
        tmp = path.with_suffix(".tmp")
        tmp.write_text(serialize_workspace(workspace), encoding="utf-8")
        tmp.replace(path)

    def _path(self, workspace_id: str) -> Path | None:
        if not self.directory:
            return None
        return self.directory / f"{workspace_id}.txt"

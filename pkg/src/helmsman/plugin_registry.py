"""Plugin manifests: identity, self-description, parameter specs, examples.

Each plugin ships one manifest file (UTF-8, INI-style):

    [plugin]            id, display_name, description, binding,
                        command (subprocess only), idempotent
    [param <name>]      kind, required, default, allowed_values, unit,
                        description
    [example <n>]       caption plus one key per argument (values as text)

Manifests are validated on registration; every input example must pass
argument validation against its own parameter specs. Bundled manifests are
immutable at runtime; user-defined ones may be replaced.
"""

from __future__ import annotations

import configparser
import io
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import (
    DuplicateBundled,
    EnumViolation,
    InvalidManifest,
    MissingRequired,
    NotFound,
    ParseError,
    TypeMismatch,
    UnknownArgument,
)
from .types import PARAM_NAME_RE, Language, is_slug


class ParamKind(str, Enum):
    STRING = "string"
    INTEGER = "integer"
    NUMBER = "number"
    BOOLEAN = "boolean"
    ENUM = "enum"
    FILE_PATH = "file_path"


class BindingKind(str, Enum):
    SUBPROCESS = "subprocess"
    BUILTIN_SIM = "builtin_sim"


class PluginOrigin(str, Enum):
    BUNDLED = "bundled"
    USER_DEFINED = "user_defined"


_TRUE_WORDS = {"true", "1", "yes", "on"}
_FALSE_WORDS = {"false", "0", "no", "off"}


def coerce_value(kind: ParamKind, value: Any, allowed: tuple[str, ...] | None = None):
    """Coerce a raw (usually textual) value to the parameter's kind.

    Raises ValueError when the coercion is ambiguous or impossible.
    """
    if kind is ParamKind.INTEGER:
        if isinstance(value, bool):
            raise ValueError("boolean is not an integer")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            return int(value.strip())
        raise ValueError(f"cannot coerce {type(value).__name__} to integer")
    if kind is ParamKind.NUMBER:
        if isinstance(value, bool):
            raise ValueError("boolean is not a number")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            return float(value.strip())
        raise ValueError(f"cannot coerce {type(value).__name__} to number")
    if kind is ParamKind.BOOLEAN:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            word = value.strip().lower()
            if word in _TRUE_WORDS:
                return True
            if word in _FALSE_WORDS:
                return False
        raise ValueError(f"cannot coerce {value!r} to boolean")
    if kind is ParamKind.ENUM:
        text = str(value)
        if allowed is None or text not in allowed:
            raise ValueError(f"{text!r} not in allowed values")
        return text
    # string / file_path
    if not isinstance(value, str):
        raise ValueError(f"expected text, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: ParamKind
    required: bool = False
    default: str | None = None
    allowed_values: tuple[str, ...] | None = None
    unit: str | None = None
    description: str = ""

    def check(self) -> list[str]:
        errors: list[str] = []
        if not PARAM_NAME_RE.match(self.name):
            errors.append(f"param {self.name!r}: invalid name")
        if self.kind is ParamKind.ENUM:
            if not self.allowed_values:
                errors.append(f"param {self.name!r}: enum needs allowed_values")
        elif self.allowed_values is not None:
            errors.append(f"param {self.name!r}: allowed_values only valid for enum")
        if self.default is not None:
            try:
                coerce_value(self.kind, self.default, self.allowed_values)
            except ValueError as exc:
                errors.append(f"param {self.name!r}: default does not type-check: {exc}")
        return errors


@dataclass(frozen=True)
class InputExample:
    values: dict[str, str]
    caption: str


@dataclass(frozen=True)
class ExecutorBinding:
    kind: BindingKind
    command: str | None = None  # {name} placeholder template, subprocess only


@dataclass(frozen=True)
class PluginManifest:
    plugin_id: str
    display_name: str
    description: str
    parameters: tuple[ParameterSpec, ...]
    input_examples: tuple[InputExample, ...]
    binding: ExecutorBinding
    idempotent: bool = True
    origin: PluginOrigin = PluginOrigin.BUNDLED

    def param(self, name: str) -> ParameterSpec | None:
        for spec in self.parameters:
            if spec.name == name:
                return spec
        return None

    def check(self) -> list[str]:
        errors: list[str] = []
        if not is_slug(self.plugin_id):
            errors.append(f"plugin_id {self.plugin_id!r} is not a valid slug")
        if not self.display_name.strip():
            errors.append("display_name must be non-empty")
        if not self.description.strip():
            errors.append("description must be non-empty (it is the matching corpus)")
        seen: set[str] = set()
        for spec in self.parameters:
            if spec.name in seen:
                errors.append(f"duplicate parameter {spec.name!r}")
            seen.add(spec.name)
            errors.extend(spec.check())
        if self.binding.kind is BindingKind.SUBPROCESS:
            if not self.binding.command:
                errors.append("subprocess binding requires a command template")
            else:
                for placeholder in re.findall(r"\{([a-z0-9_-]+)\}", self.binding.command):
                    if placeholder not in seen:
                        errors.append(
                            f"command placeholder {{{placeholder}}} has no parameter"
                        )
        elif self.binding.command:
            errors.append("builtin_sim binding must not carry a command")
        if not errors:
            for index, example in enumerate(self.input_examples, start=1):
                try:
                    validate_arguments(self, example.values)
                except Exception as exc:  # noqa: BLE001 - collected as field error
                    errors.append(f"example {index} does not validate: {exc}")
        return errors


def validate_arguments(manifest: PluginManifest, args: dict[str, Any]) -> dict[str, Any]:
    """Normalize an argument map against the manifest.

    Required params must be present, defaults are filled in, text values are
    coerced where unambiguous, unknown names are rejected.
    """
    known = {spec.name for spec in manifest.parameters}
    for name in args:
        if name not in known:
            raise UnknownArgument(
                f"unknown argument {name!r} for plugin {manifest.plugin_id!r}",
                name=name,
                plugin_id=manifest.plugin_id,
            )
    normalized: dict[str, Any] = {}
    for spec in manifest.parameters:
        if spec.name in args:
            raw = args[spec.name]
            try:
                normalized[spec.name] = coerce_value(spec.kind, raw, spec.allowed_values)
            except ValueError as exc:
                if spec.kind is ParamKind.ENUM:
                    raise EnumViolation(
                        f"argument {spec.name!r}: {exc}",
                        name=spec.name,
                        value=str(raw),
                        allowed=list(spec.allowed_values or ()),
                    ) from exc
                raise TypeMismatch(
                    f"argument {spec.name!r}: expected {spec.kind.value}, got {raw!r}",
                    name=spec.name,
                    expected=spec.kind.value,
                    got=str(raw),
                ) from exc
        elif spec.required:
            raise MissingRequired(
                f"missing required argument {spec.name!r}", name=spec.name
            )
        elif spec.default is not None:
            normalized[spec.name] = coerce_value(
                spec.kind, spec.default, spec.allowed_values
            )
    return normalized


class Registry:
    """Plugin manifests keyed by id; reads are lock-free snapshots."""

    def __init__(self) -> None:
        self._manifests: dict[str, PluginManifest] = {}
        self.version = 0
        self._lock = threading.Lock()

    def register(self, manifest: PluginManifest) -> None:
        errors = manifest.check()
        if errors:
            raise InvalidManifest(errors)
        with self._lock:
            existing = self._manifests.get(manifest.plugin_id)
            if existing is not None and existing.origin is PluginOrigin.BUNDLED:
                raise DuplicateBundled(
                    f"bundled plugin {manifest.plugin_id!r} cannot be replaced",
                    plugin_id=manifest.plugin_id,
                )
            self._manifests[manifest.plugin_id] = manifest
            self.version += 1

    def get(self, plugin_id: str) -> PluginManifest:
        manifest = self._manifests.get(plugin_id)
        if manifest is None:
            raise NotFound(f"unknown plugin {plugin_id!r}", kind="plugin", id=plugin_id)
        return manifest

    def has(self, plugin_id: str) -> bool:
        return plugin_id in self._manifests

    def ids(self) -> list[str]:
        return sorted(self._manifests)

    def manifests(self) -> list[PluginManifest]:
        return [self._manifests[pid] for pid in self.ids()]

    def __len__(self) -> int:
        return len(self._manifests)


def list_plugins(
    registry: Registry, language: Language = Language.EN
) -> list[tuple[str, str, str]]:
    """(plugin_id, display_name, description) rows, lexicographic by id.

    The manifest corpus is monolingual; ``language`` is accepted so callers
    can stay language-agnostic, and selects nothing today.
    """
    del language
    return [
        (m.plugin_id, m.display_name, m.description) for m in registry.manifests()
    ]


# --- manifest file format -----------------------------------------------------


def _manifest_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    return parser


def parse_manifest_text(
    text: str, origin: PluginOrigin = PluginOrigin.BUNDLED, source: str = "<memory>"
) -> PluginManifest:
    parser = _manifest_parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"cannot parse manifest {source}: {exc}") from exc
    if not parser.has_section("plugin"):
        raise ParseError(f"manifest {source}: missing [plugin] section")
    plugin = parser["plugin"]

    params: list[ParameterSpec] = []
    examples: list[tuple[int, InputExample]] = []
    for section in parser.sections():
        if section == "plugin":
            continue
        if section.startswith("param "):
            name = section[len("param "):].strip()
            body = parser[section]
            kind_raw = body.get("kind", "").strip()
            try:
                kind = ParamKind(kind_raw)
            except ValueError:
                raise ParseError(
                    f"manifest {source}: [{section}] unknown kind {kind_raw!r}"
                ) from None
            allowed: tuple[str, ...] | None = None
            if "allowed_values" in body:
                allowed = tuple(
                    v.strip() for v in body["allowed_values"].split(",") if v.strip()
                )
            params.append(
                ParameterSpec(
                    name=name,
                    kind=kind,
                    required=body.getboolean("required", fallback=False),
                    default=body.get("default", fallback=None),
                    allowed_values=allowed,
                    unit=body.get("unit", fallback=None),
                    description=body.get("description", fallback="").strip(),
                )
            )
        elif section.startswith("example "):
            tag = section[len("example "):].strip()
            try:
                index = int(tag)
            except ValueError:
                raise ParseError(
                    f"manifest {source}: [{section}] index must be an integer"
                ) from None
            body = parser[section]
            values = {k: v for k, v in body.items() if k != "caption"}
            examples.append(
                (index, InputExample(values=values, caption=body.get("caption", "")))
            )
        else:
            raise ParseError(f"manifest {source}: unknown section [{section}]")

    examples.sort(key=lambda pair: pair[0])
    binding_raw = plugin.get("binding", "").strip()
    try:
        binding_kind = BindingKind(binding_raw)
    except ValueError:
        raise ParseError(
            f"manifest {source}: unknown binding {binding_raw!r}"
        ) from None
    manifest = PluginManifest(
        plugin_id=plugin.get("id", "").strip(),
        display_name=plugin.get("display_name", "").strip(),
        description=plugin.get("description", "").strip(),
        parameters=tuple(params),
        input_examples=tuple(example for _, example in examples),
        binding=ExecutorBinding(
            kind=binding_kind, command=plugin.get("command", fallback=None)
        ),
        idempotent=plugin.getboolean("idempotent", fallback=True),
        origin=origin,
    )
    return manifest


def dump_manifest(manifest: PluginManifest) -> str:
    out = io.StringIO()
    out.write("[plugin]\n")
    out.write(f"id = {manifest.plugin_id}\n")
    out.write(f"display_name = {manifest.display_name}\n")
    out.write(f"description = {manifest.description}\n")
    out.write(f"binding = {manifest.binding.kind.value}\n")
    if manifest.binding.command:
        out.write(f"command = {manifest.binding.command}\n")
    out.write(f"idempotent = {'true' if manifest.idempotent else 'false'}\n")
    for spec in manifest.parameters:
        out.write(f"\n[param {spec.name}]\n")
        out.write(f"kind = {spec.kind.value}\n")
        out.write(f"required = {'true' if spec.required else 'false'}\n")
        if spec.default is not None:
            out.write(f"default = {spec.default}\n")
        if spec.allowed_values is not None:
            out.write(f"allowed_values = {', '.join(spec.allowed_values)}\n")
        if spec.unit is not None:
            out.write(f"unit = {spec.unit}\n")
        if spec.description:
            out.write(f"description = {spec.description}\n")
    for index, example in enumerate(manifest.input_examples, start=1):
        out.write(f"\n[example {index}]\n")
        if example.caption:
            out.write(f"caption = {example.caption}\n")
        for key in example.values:
            out.write(f"{key} = {example.values[key]}\n")
    return out.getvalue()


def load_manifest_file(
    path: str | Path, origin: PluginOrigin = PluginOrigin.BUNDLED
) -> PluginManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest_text(text, origin=origin, source=str(path))


def load_plugins_dir(
    directory: str | Path,
    origin: PluginOrigin = PluginOrigin.BUNDLED,
    registry: Registry | None = None,
) -> Registry:
    registry = registry or Registry()
    directory = Path(directory)
    for path in sorted(directory.glob("*.plugin")):
        registry.register(load_manifest_file(path, origin=origin))
    return registry

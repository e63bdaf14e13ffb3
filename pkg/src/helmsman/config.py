"""Engine configuration and assembly.

Precedence: environment variables (``HELMSMAN_*``) over the config file
(JSON) over packaged defaults. ``build_engine`` is the composition root:
it loads the taxonomy, corpus, and plugin manifests, cross-validates
them, and wires the session engine.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .doc_corpus import DocumentCache, corpus_check, load_corpus
from .errors import EngineError, ParseError
from .executor import ExecutionLog, WorkspaceManager, parse_workspace
from .llm_gateway import BackendConfig, BackendKind, build_backend
from .plugin_registry import PluginOrigin, Registry, load_plugins_dir
from .qa_engine import AugmentationStore
from .session import EngineSettings, SessionEngine, SessionStore
from .taxonomy import TaskTaxonomy, load_taxonomy
from .types import Language

PACKAGED_DATA = Path(__file__).parent / "data"
ENV_PREFIX = "HELMSMAN_"


@dataclass
class EngineConfig:
    taxonomy_path: Path = PACKAGED_DATA / "taxonomy.txt"
    corpus_dir: Path = PACKAGED_DATA / "corpus"
    plugins_dir: Path = PACKAGED_DATA / "plugins"
    workspace_template: Path = PACKAGED_DATA / "workspace.txt"
    data_dir: Path = Path("helmsman-data")
    backend: BackendConfig = field(
        default_factory=lambda: BackendConfig(
            kind=BackendKind.SCRIPTED, script_path=PACKAGED_DATA / "demo.script"
        )
    )
    settings: EngineSettings = field(default_factory=EngineSettings)
    default_language: Language = Language.EN
    host: str = "127.0.0.1"
    port: int = 8777


def _config_from_file(path: Path, base: EngineConfig) -> EngineConfig:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    cfg = base
    paths = {
        "taxonomy": "taxonomy_path",
        "corpus_dir": "corpus_dir",
        "plugins_dir": "plugins_dir",
        "workspace_template": "workspace_template",
        "data_dir": "data_dir",
    }
    for key, attr in paths.items():
        if key in raw:
            cfg = replace(cfg, **{attr: Path(raw[key])})
    if "backend" in raw:
        b = raw["backend"]
        cfg = replace(
            cfg,
            backend=BackendConfig(
                kind=BackendKind(b.get("kind", "scripted")),
                endpoint=b.get("endpoint"),
                api_key_ref=b.get("api_key_ref"),
                script_path=b.get("script"),
                timeout_ms=int(b.get("timeout_ms", 10_000)),
            ),
        )
    settings = cfg.settings
    for key in (
        "max_rounds",
        "top_k",
        "ungrounded_streak",
        "grounding_window",
    ):
        if key in raw:
            setattr(settings, key, int(raw[key]))
    if "grounding_min_fraction" in raw:
        settings.grounding_min_fraction = float(raw["grounding_min_fraction"])
    if "augment_max_notes" in raw:
        settings.augment_max_notes = int(raw["augment_max_notes"])
    if "exec_timeout_s" in raw:
        settings.exec_timeout_s = float(raw["exec_timeout_s"])
    if "recommend_method" in raw:
        settings.recommend_method = str(raw["recommend_method"])
    if "default_language" in raw:
        cfg = replace(cfg, default_language=Language(raw["default_language"]))
    if "host" in raw:
        cfg = replace(cfg, host=str(raw["host"]))
    if "port" in raw:
        cfg = replace(cfg, port=int(raw["port"]))
    return cfg


def _apply_env(cfg: EngineConfig, env: dict[str, str]) -> EngineConfig:
    def get(name: str) -> str | None:
        return env.get(ENV_PREFIX + name)

    for name, attr in (
        ("TAXONOMY", "taxonomy_path"),
        ("CORPUS_DIR", "corpus_dir"),
        ("PLUGINS_DIR", "plugins_dir"),
        ("WORKSPACE_TEMPLATE", "workspace_template"),
        ("DATA_DIR", "data_dir"),
    ):
        value = get(name)
        if value:
            cfg = replace(cfg, **{attr: Path(value)})
    if get("BACKEND_KIND") or get("BACKEND_SCRIPT") or get("BACKEND_ENDPOINT"):
        kind = BackendKind(get("BACKEND_KIND") or cfg.backend.kind.value)
        cfg = replace(
            cfg,
            backend=BackendConfig(
                kind=kind,
                endpoint=get("BACKEND_ENDPOINT") or cfg.backend.endpoint,
                api_key_ref=get("BACKEND_API_KEY_REF") or cfg.backend.api_key_ref,
                script_path=get("BACKEND_SCRIPT") or cfg.backend.script_path,
                timeout_ms=int(get("BACKEND_TIMEOUT_MS") or cfg.backend.timeout_ms),
            ),
        )
    if get("MAX_ROUNDS"):
        cfg.settings.max_rounds = int(get("MAX_ROUNDS"))
    if get("TOP_K"):
        cfg.settings.top_k = int(get("TOP_K"))
    if get("RECOMMEND_METHOD"):
        cfg.settings.recommend_method = get("RECOMMEND_METHOD")
    if get("EXEC_TIMEOUT_S"):
        cfg.settings.exec_timeout_s = float(get("EXEC_TIMEOUT_S"))
    if get("DEFAULT_LANGUAGE"):
        cfg = replace(cfg, default_language=Language(get("DEFAULT_LANGUAGE")))
    if get("HOST"):
        cfg = replace(cfg, host=get("HOST"))
    if get("PORT"):
        cfg = replace(cfg, port=int(get("PORT")))
    return cfg


def load_config(
    path: str | Path | None = None, env: dict[str, str] | None = None
) -> EngineConfig:
    cfg = EngineConfig()
    if path is not None:
        cfg = _config_from_file(Path(path), cfg)
    cfg = _apply_env(cfg, os.environ if env is None else env)
    return cfg


def validate_config(config: EngineConfig) -> list[str]:
    """Full cross-check of taxonomy, corpus, and registry; returns problems."""
    problems: list[str] = []
    taxonomy: TaskTaxonomy | None = None
    try:
        taxonomy = load_taxonomy(config.taxonomy_path)
    except EngineError as exc:
        problems.append(f"taxonomy: {exc}")
    store = None
    try:
        store = load_corpus(config.corpus_dir)
    except EngineError as exc:
        problems.append(f"corpus: {exc}")
    if taxonomy is not None and store is not None:
        problems.extend(corpus_check(taxonomy, store))
    try:
        load_plugins_dir(config.plugins_dir, origin=PluginOrigin.BUNDLED)
    except EngineError as exc:
        problems.append(f"plugins: {exc}")
    try:
        parse_workspace(config.workspace_template.read_text(encoding="utf-8"))
    except (OSError, EngineError) as exc:
        problems.append(f"workspace template: {exc}")
    if config.backend.kind is BackendKind.SCRIPTED:
        try:
            build_backend(config.backend)
        except EngineError as exc:
            problems.append(f"backend script: {exc}")
    return problems


class StartupError(EngineError):
    code = "startup_failed"

    def __init__(self, problems: list[str]) -> None:
        super().__init__(
            "startup validation failed:\n" + "\n".join(f"- {p}" for p in problems),
            problems=problems,
        )


def build_engine(config: EngineConfig, *, validate: bool = True) -> SessionEngine:
    if validate:
        problems = validate_config(config)
        if problems:
            raise StartupError(problems)
    taxonomy = load_taxonomy(config.taxonomy_path)
    store = load_corpus(config.corpus_dir)
    registry = load_plugins_dir(config.plugins_dir, origin=PluginOrigin.BUNDLED)
    backend = build_backend(config.backend)
    data_dir = Path(config.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    template = parse_workspace(
        config.workspace_template.read_text(encoding="utf-8")
    )
    return SessionEngine(
        taxonomy=taxonomy,
        doc_cache=DocumentCache(store),
        registry=registry,
        backend=backend,
        augmentation_store=AugmentationStore(data_dir / "augmentations.jsonl"),
        workspaces=WorkspaceManager(data_dir / "workspaces", template=template),
        execution_log=ExecutionLog(data_dir / "executions.jsonl"),
        session_store=SessionStore(data_dir / "sessions"),
        settings=config.settings,
    )

"""Admin CLI: ingest, validate, chat (headless REPL), serve.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from .config import EngineConfig, StartupError, build_engine, load_config
from .doc_corpus import ingest
from .errors import EngineError
from .llm_gateway import BackendConfig, BackendKind
from .session import Event, EventKind, Phase, SessionEngine
from .types import Language


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file (JSON)")


def cmd_ingest(args: argparse.Namespace) -> int:
    languages = (
        [Language(args.language)]
        if args.language != "all"
        else [Language.EN, Language.ZH]
    )
    corpus_dir = args.corpus or load_config(args.config).corpus_dir
    rows = []
    try:
        for language in languages:
            for fragment in ingest(corpus_dir, language):
                rows.append(
                    {
                        "id": fragment.id,
                        "language": fragment.language.value,
                        "title": fragment.title,
                        "source_ref": fragment.source_ref,
                        "checksum": fragment.checksum,
                    }
                )
    except EngineError as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    for row in rows:
        print(f"{row['language']} {row['id']} {row['checksum'][:12]}")
    print(f"ingested {len(rows)} fragments from {corpus_dir}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    from .config import validate_config

    config = load_config(args.config)
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(f"error: {problem}", file=sys.stderr)
        print(f"validation failed: {len(problems)} problem(s)", file=sys.stderr)
        return 1
    print("validation ok: taxonomy, corpus, plugins and workspace template agree")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    config = load_config(args.config)
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    try:
        engine = build_engine(config)
    except StartupError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    uvicorn.run(create_app(engine), host=config.host, port=config.port, log_level="warning")
    return 0


# --- chat REPL ---------------------------------------------------------------


def _render_effects(effects: list[dict], out) -> None:
    for effect in effects:
        kind = effect["type"]
        if kind == "candidates":
            print(f"candidates (round {effect['round']}):", file=out)
            for i, row in enumerate(effect["candidates"], start=1):
                print(f"  {i}. {row['id']}: {row['title']}", file=out)
        elif kind == "sub_proposal":
            print(
                f"subtask proposal: {effect['subtask_id']}: {effect['title']}",
                file=out,
            )
        elif kind == "document":
            print(
                f"document ready: {effect['doc_id']} "
                f"({len(effect['fragments'])} fragments)",
                file=out,
            )
            for i, frag in enumerate(effect["fragments"], start=1):
                print(f"  {i}. {frag['id']}: {frag['title']}", file=out)
        elif kind == "answer":
            if effect["grounded"]:
                cited = ", ".join(effect["cited_fragments"])
                print(f"answer (grounded, cites {cited}): {effect['answer']}", file=out)
            else:
                print(f"answer (ungrounded): {effect['answer']}", file=out)
        elif kind == "bottleneck":
            print(
                f"bottleneck ({effect['kind']}): {effect['evidence']}; "
                f"learned {effect['notes_added']} notes; "
                "use /reroute <topic> to start over",
                file=out,
            )
        elif kind == "recommendation":
            print(f"recommendations for: {effect['need']}", file=out)
            for i, row in enumerate(effect["ranked"], start=1):
                print(f"  {i}. {row['plugin_id']} ({row['score']:.2f})", file=out)
        elif kind == "elicitation":
            print(f"parameters for {effect['plugin_id']}:", file=out)
            for prompt in effect["prompts"]:
                bits = [prompt["kind"]]
                if prompt["required"]:
                    bits.append("required")
                if prompt["default"] is not None:
                    bits.append(f"default {prompt['default']}")
                if prompt["unit"]:
                    bits.append(prompt["unit"])
                print(
                    f"  {prompt['name']} ({', '.join(bits)}): {prompt['description']}",
                    file=out,
                )
            for example in effect["examples"]:
                pairs = " ".join(f"{k}={v}" for k, v in example["values"].items())
                caption = f"  # {example['caption']}" if example["caption"] else ""
                print(f"  example: {pairs}{caption}", file=out)
        elif kind == "execution":
            print(
                f"execution {effect['outcome']}: {effect['changed']} items changed, "
                f"workspace version {effect['workspace_version']}",
                file=out,
            )
            if effect.get("stdout_excerpt"):
                print(f"  {effect['stdout_excerpt'].strip()}", file=out)
            if effect.get("error"):
                print(f"  error: {effect['error']['message']}", file=out)
        else:
            print(f"[{kind}] {effect}", file=out)


def _event_for_line(engine: SessionEngine, session, line: str) -> Event | None:
    """Map one REPL line onto a state-machine event; None means quit."""
    if line in ("/quit", "/exit"):
        return None
    if line.startswith("/confirm"):
        target = line[len("/confirm"):].strip() or None
        if session.phase is Phase.ROUTING_MAIN:
            return Event(EventKind.CONFIRM_MAIN, main_id=target)
        if session.phase is Phase.ROUTING_SUB:
            return Event(EventKind.CONFIRM_SUB, subtask_id=target)
        if session.phase is Phase.RECOMMENDING:
            return Event(EventKind.CONFIRM_PLUGIN, plugin_id=target)
        return Event(EventKind.CONFIRM_MAIN, main_id=target)  # let it error
    if line.startswith("/reject "):
        rest = line[len("/reject "):].strip()
        ids_part, _, reason = rest.partition(" ")
        ids = tuple(x.strip() for x in ids_part.split(",") if x.strip())
        return Event(EventKind.REJECT, rejected_ids=ids, reason=reason.strip())
    if line.startswith("/choose "):
        return Event(EventKind.CONFIRM_PLUGIN, plugin_id=line[len("/choose "):].strip())
    if line.startswith("/run"):
        rest = line[len("/run"):].strip()
        args: dict[str, str] = {}
        for pair in rest.split():
            key, _, value = pair.partition("=")
            args[key] = value
        return Event(EventKind.SUBMIT_ARGS, args=args)
    if line.startswith("/reroute "):
        return Event(EventKind.ACCEPT_REROUTE, text=line[len("/reroute "):].strip())
    return Event(EventKind.MESSAGE, text=line)


def cmd_chat(args: argparse.Namespace) -> int:
    language = Language(args.language)
    config = load_config(args.config)
    if args.script:
        config.backend = BackendConfig(
            kind=BackendKind.SCRIPTED, script_path=args.script
        )
    out = sys.stdout
    with tempfile.TemporaryDirectory(prefix="helmsman-chat-") as tmp:
        if args.data_dir is None:
            config.data_dir = Path(tmp)
        else:
            config.data_dir = args.data_dir
        try:
            engine = build_engine(config)
        except StartupError as exc:
            print(str(exc), file=sys.stderr)
            return 1
        session = engine.create_session(language)
        interactive = sys.stdin.isatty()
        print(f"helmsman chat ({language.value}); /quit to exit", file=out)
        while True:
            if interactive:
                out.write("you> ")
                out.flush()
            line = sys.stdin.readline()
            if not line:
                break
            line = line.rstrip("\n").strip()
            if not line:
                continue
            if not interactive:
                print(f"you> {line}", file=out)
            event = _event_for_line(engine, session, line)
            if event is None:
                break
            try:
                effects = engine.advance(session, event)
            except EngineError as exc:
                print(f"error ({exc.code}): {exc.message}", file=out)
                continue
            _render_effects(effects, out)
        print("bye.", file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="helmsman",
        description="AI-assistant orchestration engine: routing, tailored "
        "documentation, grounded QA, plugin execution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="run documentation ingestion")
    p_ingest.add_argument("--corpus", type=Path, default=None, help="corpus directory")
    p_ingest.add_argument(
        "--language", choices=["en", "zh", "all"], default="all", help="language(s)"
    )
    p_ingest.add_argument("--out", type=Path, default=None, help="write JSONL dump")
    _add_config_arg(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_validate = sub.add_parser(
        "validate", help="cross-check taxonomy, corpus and plugin manifests"
    )
    _add_config_arg(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_chat = sub.add_parser("chat", help="headless REPL against a scripted backend")
    p_chat.add_argument("--script", type=Path, default=None, help="backend script file")
    p_chat.add_argument("--language", choices=["en", "zh"], default="en")
    p_chat.add_argument(
        "--data-dir", type=Path, default=None, help="persist session data here"
    )
    _add_config_arg(p_chat)
    p_chat.set_defaults(func=cmd_chat)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)
    _add_config_arg(p_serve)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error ({exc.code}): {exc.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

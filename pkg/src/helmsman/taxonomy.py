"""Main-task/subtask taxonomy: loading, validation, and routing digests.

The taxonomy is a curated, human-editable text file. Sections:

    [taxonomy]          version = <int>
    [main:<id>]         title_en, title_zh, description
    [sub:<id>]          parent, title_en, title_zh, description, fragments

Subtasks keep file order within their parent; ids are slugs
(``[a-z0-9-]{1,64}``) and must be unique across the whole tree.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DanglingFragment, DuplicateId, EmptySubtasks, NotFound, ParseError
from .types import Language, is_slug


@dataclass
class SubTask:
    id: str
    parent_id: str
    title_en: str
    title_zh: str
    description: str
    fragment_ids: list[str]

    def title(self, language: Language) -> str:
        return self.title_zh if language is Language.ZH else self.title_en


@dataclass
class MainTask:
    id: str
    title_en: str
    title_zh: str
    description: str
    subtasks: list[SubTask] = field(default_factory=list)

    def title(self, language: Language) -> str:
        return self.title_zh if language is Language.ZH else self.title_en

    def subtask(self, sub_id: str) -> SubTask | None:
        for sub in self.subtasks:
            if sub.id == sub_id:
                return sub
        return None


@dataclass
class TaskTaxonomy:
    main_tasks: list[MainTask]
    version: int = 1

    def main(self, main_id: str) -> MainTask:
        for task in self.main_tasks:
            if task.id == main_id:
                return task
        raise NotFound(f"unknown main task {main_id!r}", kind="main_task", id=main_id)

    def has_main(self, main_id: str) -> bool:
        return any(task.id == main_id for task in self.main_tasks)

    def main_ids(self) -> list[str]:
        return [task.id for task in self.main_tasks]

    def all_subtasks(self) -> list[SubTask]:
        return [sub for task in self.main_tasks for sub in task.subtasks]

    def all_fragment_ids(self) -> list[str]:
        seen: list[str] = []
        for sub in self.all_subtasks():
            for frag in sub.fragment_ids:
                if frag not in seen:
                    seen.append(frag)
        return seen


MAX_MAIN_TASKS = 64


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive
    return parser


def _require(section: configparser.SectionProxy, key: str, where: str) -> str:
    value = section.get(key, "").strip()
    if not value:
        raise ParseError(f"{where}: missing or empty {key!r}")
    return value


def load_taxonomy(
    path: str | Path, fragment_ids: set[str] | None = None
) -> TaskTaxonomy:
    """Load and validate a taxonomy file.

    When ``fragment_ids`` is given (the corpus fragment id set), every
    referenced fragment must resolve or DanglingFragment is raised.
    """
    path = Path(path)
    parser = _parser()
    try:
        with path.open(encoding="utf-8") as handle:
            parser.read_file(handle, source=str(path))
    except configparser.DuplicateSectionError as exc:
        dup = exc.section.split(":", 1)[-1]
        raise DuplicateId(f"duplicate id {dup!r}", id=dup) from exc
    except (configparser.Error, OSError) as exc:
        raise ParseError(f"cannot parse taxonomy {path}: {exc}") from exc

    version = 1
    if parser.has_section("taxonomy"):
        try:
            version = parser.getint("taxonomy", "version", fallback=1)
        except ValueError as exc:
            raise ParseError(f"taxonomy version must be an integer: {exc}") from exc

    mains: dict[str, MainTask] = {}
    order: list[str] = []
    subs: list[tuple[str, SubTask]] = []
    seen_ids: set[str] = set()

    for name in parser.sections():
        if name == "taxonomy":
            continue
        if name.startswith("main:"):
            main_id = name[len("main:"):]
            if not is_slug(main_id):
                raise ParseError(f"main task id {main_id!r} is not a valid slug")
            if main_id in seen_ids:
                raise DuplicateId(f"duplicate id {main_id!r}", id=main_id)
            seen_ids.add(main_id)
            section = parser[name]
            mains[main_id] = MainTask(
                id=main_id,
                title_en=_require(section, "title_en", name),
                title_zh=_require(section, "title_zh", name),
                description=_require(section, "description", name),
            )
            order.append(main_id)
        elif name.startswith("sub:"):
            sub_id = name[len("sub:"):]
            if not is_slug(sub_id):
                raise ParseError(f"subtask id {sub_id!r} is not a valid slug")
            if sub_id in seen_ids:
                raise DuplicateId(f"duplicate id {sub_id!r}", id=sub_id)
            seen_ids.add(sub_id)
            section = parser[name]
            parent = _require(section, "parent", name)
            fragments = [
                frag.strip()
                for frag in _require(section, "fragments", name).split(",")
                if frag.strip()
            ]
            if not fragments:
                raise ParseError(f"{name}: fragments list is empty")
            for frag in fragments:
                if not is_slug(frag):
                    raise ParseError(f"{name}: fragment id {frag!r} is not a valid slug")
            subs.append(
                (
                    parent,
                    SubTask(
                        id=sub_id,
                        parent_id=parent,
                        title_en=_require(section, "title_en", name),
                        title_zh=_require(section, "title_zh", name),
                        description=_require(section, "description", name),
                        fragment_ids=fragments,
                    ),
                )
            )
        else:
            raise ParseError(f"unknown section {name!r} (expected main:* or sub:*)")

    for parent, sub in subs:
        if parent not in mains:
            raise ParseError(f"sub:{sub.id}: unknown parent {parent!r}")
        mains[parent].subtasks.append(sub)

    if not order:
        raise ParseError("taxonomy defines no main tasks")
    if len(order) > MAX_MAIN_TASKS:
        raise ParseError(
            f"taxonomy defines {len(order)} main tasks (max {MAX_MAIN_TASKS})"
        )
    for main_id in order:
        if not mains[main_id].subtasks:
            raise EmptySubtasks(
                f"main task {main_id!r} has no subtasks", main_id=main_id
            )

    taxonomy = TaskTaxonomy(main_tasks=[mains[m] for m in order], version=version)
    if fragment_ids is not None:
        validate_fragments(taxonomy, fragment_ids)
    return taxonomy


def validate_fragments(taxonomy: TaskTaxonomy, fragment_ids: set[str]) -> None:
    """Raise DanglingFragment on the first unresolvable fragment reference."""
    for sub in taxonomy.all_subtasks():
        for frag in sub.fragment_ids:
            if frag not in fragment_ids:
                raise DanglingFragment(
                    f"subtask {sub.id!r} references unknown fragment {frag!r}",
                    sub_id=sub.id,
                    fragment_id=frag,
                )


def lookup_subtask(taxonomy: TaskTaxonomy, sub_id: str) -> SubTask:
    for sub in taxonomy.all_subtasks():
        if sub.id == sub_id:
            return sub
    raise NotFound(f"unknown subtask {sub_id!r}", kind="subtask", id=sub_id)


def routing_digest(taxonomy: TaskTaxonomy, language: Language) -> str:
    """One line per main task, taxonomy order: ``<id>: <title>: <description>``."""
    return "\n".join(
        f"{task.id}: {task.title(language)}: {task.description}"
        for task in taxonomy.main_tasks
    )


def subtask_digest(main: MainTask, language: Language) -> str:
    """Same shape as routing_digest, over one main task's subtasks."""
    return "\n".join(
        f"{sub.id}: {sub.title(language)}: {sub.description}"
        for sub in main.subtasks
    )


def dump_taxonomy(taxonomy: TaskTaxonomy) -> str:
    """Serialize back to the taxonomy file format (load round-trips)."""
    out = io.StringIO()
    out.write("[taxonomy]\n")
    out.write(f"version = {taxonomy.version}\n")
    for task in taxonomy.main_tasks:
        out.write(f"\n[main:{task.id}]\n")
        out.write(f"title_en = {task.title_en}\n")
        out.write(f"title_zh = {task.title_zh}\n")
        out.write(f"description = {task.description}\n")
        for sub in task.subtasks:
            out.write(f"\n[sub:{sub.id}]\n")
            out.write(f"parent = {sub.parent_id}\n")
            out.write(f"title_en = {sub.title_en}\n")
            out.write(f"title_zh = {sub.title_zh}\n")
            out.write(f"description = {sub.description}\n")
            out.write(f"fragments = {', '.join(sub.fragment_ids)}\n")
    return out.getvalue()


def save_taxonomy(taxonomy: TaskTaxonomy, path: str | Path) -> None:
    Path(path).write_text(dump_taxonomy(taxonomy), encoding="utf-8")

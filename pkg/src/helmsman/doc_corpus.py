"""Documentation corpus: ingestion, fragment store, stitching, QA context.

Source documentation is decomposed into per-subtask fragments driven by an
explicit mapping file (one line per fragment):

    <fragment-id> TAB <source-file> TAB <anchor> TAB <language>

A fragment spans from the heading carrying its anchor up to the next
mapped heading in the same file. Bodies are sanitized against a tag
whitelist (script/style are stripped wholesale, event handlers and
javascript: URLs are rejected), cross-file relative links become anchor
links, and referenced images are pulled into a content-addressed asset
pool. Stitching assembles selected fragments into one self-contained HTML
document with an inline stylesheet, a generated table of contents, and the
engine's own navigation script; the same stitch inputs always produce the
same bytes.
"""

from __future__ import annotations

import hashlib
import posixpath
import re
import threading
from dataclasses import dataclass
from html import escape
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable

from .errors import (
    AssetMiss,
    DocNotFound,
    DuplicateId,
    EmptySelection,
    MappingMiss,
    ParseError,
    SanitizeReject,
    UnknownFragment,
)
from .taxonomy import TaskTaxonomy
from .types import Language, is_slug, utc_now_rfc3339

ALLOWED_TAGS = {
    "h1", "h2", "h3", "h4", "h5", "h6",
    "p", "ul", "ol", "li", "dl", "dt", "dd",
    "a", "em", "strong", "b", "i", "u", "s", "code", "pre", "kbd", "samp",
    "sup", "sub", "br", "hr", "img", "blockquote", "q", "cite",
    "table", "thead", "tbody", "tfoot", "tr", "th", "td", "caption",
    "figure", "figcaption", "span", "div", "section", "mark", "abbr",
}
STRIPPED_TAGS = {"script", "style"}
VOID_TAGS = {"br", "hr", "img"}
BLOCK_TAGS = {
    "h1", "h2", "h3", "h4", "h5", "h6", "p", "ul", "ol", "li", "dl", "dt",
    "dd", "pre", "blockquote", "table", "tr", "caption", "figure",
    "figcaption", "div", "section", "hr",
}
HEADING_TAGS = {"h1", "h2", "h3", "h4", "h5", "h6"}

_ASSET_REF_RE = re.compile(r"assets/([A-Za-z0-9._-]+)")


@dataclass(frozen=True)
class DocFragment:
    id: str
    language: Language
    title: str
    body_html: str
    source_ref: str
    checksum: str


@dataclass(frozen=True)
class TailoredDocument:
    doc_id: str
    fragment_ids: tuple[str, ...]
    language: Language
    html: str
    created_at: str

    def asset_names(self) -> list[str]:
        seen: list[str] = []
        for name in _ASSET_REF_RE.findall(self.html):
            if name not in seen:
                seen.append(name)
        return seen


def _checksum(body_html: str) -> str:
    return hashlib.sha256(body_html.encode("utf-8")).hexdigest()


# --- sanitizer --------------------------------------------------------------


class _Sanitizer(HTMLParser):
    """Rebuilds HTML keeping only whitelisted structure.

    Rejects (with location) anything that smells executable; silently drops
    unknown attributes and comments. Raises SanitizeReject / AssetMiss.
    """

    def __init__(
        self,
        where: str,
        rewrite_href: Callable[[str], str],
        rewrite_src: Callable[[str, tuple[int, int]], str],
        heading_id_for: Callable[[str | None], str | None],
    ) -> None:
        super().__init__(convert_charrefs=True)
        self.where = where
        self.rewrite_href = rewrite_href
        self.rewrite_src = rewrite_src
        self.heading_id_for = heading_id_for
        self.out: list[str] = []
        self._strip_depth = 0
        self._first_heading_done = False

    def _reject(self, why: str) -> None:
        line, col = self.getpos()
        raise SanitizeReject(
            f"{self.where}:{line}:{col}: {why}", where=self.where, line=line, col=col
        )

    def _check_attrs(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        for name, value in attrs:
            if name.lower().startswith("on"):
                self._reject(f"event handler attribute {name!r} on <{tag}>")
            if name.lower() in ("href", "src") and value:
                if value.strip().lower().startswith("javascript:"):
                    self._reject(f"javascript: URL on <{tag}>")

    def _emit_start(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        kept: list[tuple[str, str]] = []
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value is not None:
                    kept.append(("href", self.rewrite_href(value)))
        elif tag == "img":
            src = alt = None
            for name, value in attrs:
                if name == "src":
                    src = value
                elif name == "alt":
                    alt = value
            if src is None:
                self._reject("<img> without src")
            kept.append(("src", self.rewrite_src(src, self.getpos())))
            if alt is not None:
                kept.append(("alt", alt))
        elif tag in HEADING_TAGS and not self._first_heading_done:
            self._first_heading_done = True
            source_id = next((v for k, v in attrs if k == "id"), None)
            new_id = self.heading_id_for(source_id)
            if new_id:
                kept.append(("id", new_id))
        rendered = "".join(f' {k}="{escape(v, quote=True)}"' for k, v in kept)
        self.out.append(f"<{tag}{rendered}>")

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        if self._strip_depth:
            if tag in STRIPPED_TAGS:
                self._strip_depth += 1
            return
        self._check_attrs(tag, attrs)
        if tag in STRIPPED_TAGS:
            self._strip_depth = 1
            return
        if tag not in ALLOWED_TAGS:
            self._reject(f"disallowed tag <{tag}>")
        self._emit_start(tag, attrs)

    def handle_startendtag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        if self._strip_depth:
            return
        self._check_attrs(tag, attrs)
        if tag in STRIPPED_TAGS:
            return
        if tag not in ALLOWED_TAGS:
            self._reject(f"disallowed tag <{tag}>")
        self._emit_start(tag, attrs)

    def handle_endtag(self, tag: str) -> None:
        if self._strip_depth:
            if tag in STRIPPED_TAGS:
                self._strip_depth -= 1
            return
        if tag in STRIPPED_TAGS or tag not in ALLOWED_TAGS:
            return
        if tag not in VOID_TAGS:
            self.out.append(f"</{tag}>")

    def handle_data(self, data: str) -> None:
        if not self._strip_depth:
            self.out.append(escape(data))

    def result(self) -> str:
        return "".join(self.out).strip()


# --- heading scan -----------------------------------------------------------


class _HeadingScanner(HTMLParser):
    """Records every heading with an id: (anchor, char offset, text)."""

    def __init__(self, text: str) -> None:
        super().__init__(convert_charrefs=True)
        self._line_offsets = [0]
        for line in text.split("\n")[:-1]:
            self._line_offsets.append(self._line_offsets[-1] + len(line) + 1)
        self.headings: list[dict] = []
        self._open: dict | None = None

    def _offset(self) -> int:
        line, col = self.getpos()
        return self._line_offsets[line - 1] + col

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        if tag in HEADING_TAGS:
            anchor = next((v for k, v in attrs if k == "id"), None)
            self._open = {
                "tag": tag,
                "anchor": anchor,
                "offset": self._offset(),
                "text": [],
            }

    def handle_data(self, data: str) -> None:
        if self._open is not None:
            self._open["text"].append(data)

    def handle_endtag(self, tag: str) -> None:
        if self._open is not None and tag == self._open["tag"]:
            entry = self._open
            entry["text"] = " ".join("".join(entry["text"]).split())
            self.headings.append(entry)
            self._open = None


def _body_inner(html: str) -> str:
    match = re.search(r"<body[^>]*>", html, flags=re.IGNORECASE)
    if not match:
        return html
    start = match.end()
    end_match = re.search(r"</body\s*>", html, flags=re.IGNORECASE)
    end = end_match.start() if end_match else len(html)
    return html[start:end]


# --- mapping + ingest ---------------------------------------------------------


@dataclass(frozen=True)
class MappingEntry:
    fragment_id: str
    source_file: str
    anchor: str
    language: Language


def load_mapping(path: str | Path) -> list[MappingEntry]:
    path = Path(path)
    entries: list[MappingEntry] = []
    seen: set[tuple[str, str]] = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read mapping {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(
                f"mapping line {line_no}: expected 4 tab-separated fields",
                line=line_no,
            )
        frag_id, source_file, anchor, lang_raw = (p.strip() for p in parts)
        if not is_slug(frag_id):
            raise ParseError(
                f"mapping line {line_no}: fragment id {frag_id!r} is not a slug",
                line=line_no,
            )
        try:
            language = Language(lang_raw)
        except ValueError:
            raise ParseError(
                f"mapping line {line_no}: unknown language {lang_raw!r}", line=line_no
            ) from None
        key = (frag_id, language.value)
        if key in seen:
            raise DuplicateId(
                f"mapping line {line_no}: duplicate fragment ({frag_id}, {lang_raw})",
                id=frag_id,
            )
        seen.add(key)
        entries.append(MappingEntry(frag_id, source_file, anchor, language))
    return entries


class FragmentStore:
    """Fragments plus the content-addressed asset pool; immutable once built."""

    def __init__(self) -> None:
        self._fragments: dict[tuple[str, str], DocFragment] = {}
        self.assets: dict[str, bytes] = {}

    def add(self, fragment: DocFragment) -> None:
        key = (fragment.id, fragment.language.value)
        if key in self._fragments:
            raise DuplicateId(
                f"fragment ({fragment.id}, {fragment.language.value}) already ingested",
                id=fragment.id,
            )
        self._fragments[key] = fragment

    def add_asset(self, name: str, data: bytes) -> None:
        self.assets.setdefault(name, data)

    def get(self, fragment_id: str, language: Language) -> DocFragment:
        try:
            return self._fragments[(fragment_id, language.value)]
        except KeyError:
            raise UnknownFragment(
                f"unknown fragment {fragment_id!r} ({language.value})",
                fragment_id=fragment_id,
                language=language.value,
            ) from None

    def has(self, fragment_id: str, language: Language) -> bool:
        return (fragment_id, language.value) in self._fragments

    def ids(self, language: Language) -> set[str]:
        return {fid for fid, lang in self._fragments if lang == language.value}

    def fragments(self) -> list[DocFragment]:
        return list(self._fragments.values())

    def corpus_version(self) -> str:
        digest = hashlib.sha256()
        for key in sorted(self._fragments):
            digest.update(repr(key).encode("utf-8"))
            digest.update(self._fragments[key].checksum.encode("ascii"))
        return digest.hexdigest()[:16]


def ingest(
    source_dir: str | Path,
    language: Language,
    *,
    mapping_path: str | Path | None = None,
    store: FragmentStore | None = None,
) -> list[DocFragment]:
    """Ingest all fragments of one language from a source tree.

    Deterministic for fixed input; fragments come back in mapping order.
    When ``store`` is given, fragments and assets are added to it.
    """
    source_dir = Path(source_dir)
    mapping_path = Path(mapping_path) if mapping_path else source_dir / "mapping.tsv"
    entries = [e for e in load_mapping(mapping_path) if e.language is language]

    # anchor -> fragment id lookup for this language, for link rewriting
    anchor_to_frag: dict[tuple[str, str], str] = {
        (e.source_file, e.anchor): e.fragment_id for e in entries
    }
    file_first_frag: dict[str, str] = {}
    for entry in entries:
        file_first_frag.setdefault(entry.source_file, entry.fragment_id)

    by_file: dict[str, list[MappingEntry]] = {}
    for entry in entries:
        by_file.setdefault(entry.source_file, []).append(entry)

    fragments: dict[str, DocFragment] = {}
    local_assets: dict[str, bytes] = {}

    for source_file, file_entries in by_file.items():
        file_path = source_dir / source_file
        try:
            raw = file_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read source {file_path}: {exc}") from exc
        body = _body_inner(raw)
        scanner = _HeadingScanner(body)
        scanner.feed(body)
        scanner.close()
        by_anchor = {
            h["anchor"]: h for h in scanner.headings if h["anchor"] is not None
        }
        for entry in file_entries:
            if entry.anchor not in by_anchor:
                raise MappingMiss(
                    f"anchor {entry.anchor!r} not found in {source_file}",
                    anchor=entry.anchor,
                    source_file=source_file,
                )
        mapped_offsets = sorted(
            by_anchor[e.anchor]["offset"] for e in file_entries
        )

        def slice_for(offset: int) -> str:
            later = [o for o in mapped_offsets if o > offset]
            end = later[0] if later else len(body)
            return body[offset:end]

        def rewrite_href(url: str, _file: str = source_file) -> str:
            if re.match(r"^[a-z][a-z0-9+.-]*:", url) or url.startswith("//"):
                return url  # absolute
            if url.startswith("#"):
                target = anchor_to_frag.get((_file, url[1:]))
                return f"#frag-{target}" if target else url
            page, _, frag = url.partition("#")
            # hrefs are relative to the source file; mapping paths are
            # relative to the corpus root
            page = posixpath.normpath(posixpath.join(posixpath.dirname(_file), page))
            if frag:
                target = anchor_to_frag.get((page, frag))
                if target:
                    return f"#frag-{target}"
                return f"#{frag}"
            target = file_first_frag.get(page)
            return f"#frag-{target}" if target else url

        for entry in file_entries:
            heading = by_anchor[entry.anchor]
            chunk = slice_for(heading["offset"])

            def rewrite_src(
                url: str, pos: tuple[int, int], _file_path: Path = file_path
            ) -> str:
                if re.match(r"^(?:[a-z][a-z0-9+.-]*:|//)", url):
                    return url  # absolute or data: URI
                asset_path = (_file_path.parent / url).resolve()
                try:
                    data = asset_path.read_bytes()
                except OSError:
                    raise AssetMiss(
                        f"{_file_path.name}:{pos[0]}: image {url!r} not found",
                        src=url,
                        source_file=_file_path.name,
                    ) from None
                suffix = Path(url).suffix
                name = hashlib.sha256(data).hexdigest()[:12] + suffix
                local_assets[name] = data
                return f"assets/{name}"

            sanitizer = _Sanitizer(
                where=f"{source_file}#{entry.anchor}",
                rewrite_href=rewrite_href,
                rewrite_src=rewrite_src,
                heading_id_for=lambda _src, fid=entry.fragment_id: f"frag-{fid}",
            )
            sanitizer.feed(chunk)
            sanitizer.close()
            body_html = sanitizer.result()
            fragments[entry.fragment_id] = DocFragment(
                id=entry.fragment_id,
                language=language,
                title=heading["text"],
                body_html=body_html,
                source_ref=f"{source_file}#{entry.anchor}",
                checksum=_checksum(body_html),
            )

    ordered = [fragments[e.fragment_id] for e in entries]
    if store is not None:
        for fragment in ordered:
            store.add(fragment)
        for name, data in local_assets.items():
            store.add_asset(name, data)
    return ordered


def load_corpus(
    source_dir: str | Path,
    languages: tuple[Language, ...] = (Language.EN, Language.ZH),
) -> FragmentStore:
    store = FragmentStore()
    for language in languages:
        ingest(source_dir, language, store=store)
    return store


# --- stitching -----------------------------------------------------------------

_DOC_CSS = """\
body { font-family: system-ui, sans-serif; margin: 0 auto; max-width: 46rem;
       padding: 1.5rem; color: #1c2733; line-height: 1.55; }
nav.toc { background: #f2f5f8; border: 1px solid #d6dee6; border-radius: 6px;
          padding: 0.75rem 1.25rem; margin-bottom: 1.5rem; }
nav.toc h2 { font-size: 1rem; margin: 0 0 0.5rem; }
nav.toc ol { margin: 0; padding-left: 1.25rem; }
section.fragment { border-top: 1px solid #d6dee6; padding-top: 0.75rem;
                   margin-top: 1.25rem; }
section.fragment:first-of-type { border-top: none; margin-top: 0; }
pre, code, kbd { background: #f2f5f8; border-radius: 3px; }
pre { padding: 0.5rem; overflow-x: auto; }
img { max-width: 100%; }
a.backtop { font-size: 0.8rem; }
"""

# Navigation helper: the single script allowed in a tailored document.
_DOC_SCRIPT = """\
document.querySelectorAll('nav.toc a').forEach(function (link) {
  link.addEventListener('click', function () {
    document.querySelectorAll('nav.toc a').forEach(function (other) {
      other.classList.remove('active');
    });
    link.classList.add('active');
  });
});
"""

_TOC_TITLE = {Language.EN: "Contents", Language.ZH: "目录"}
_DOC_TITLE = {Language.EN: "Tailored documentation", Language.ZH: "定制文档"}


def doc_id_for(
    fragment_ids: list[str] | tuple[str, ...],
    language: Language,
    corpus_version: str,
) -> str:
    digest = hashlib.sha256(
        f"{language.value}|{corpus_version}|{','.join(fragment_ids)}".encode("utf-8")
    )
    return "doc-" + digest.hexdigest()[:16]


def stitch(
    fragment_ids: list[str] | tuple[str, ...],
    language: Language,
    store: FragmentStore,
    *,
    clock: Callable[[], str] = utc_now_rfc3339,
) -> TailoredDocument:
    """Assemble fragments, in order, into one self-contained document."""
    ids = list(fragment_ids)
    if not ids:
        raise EmptySelection("no fragments selected")
    if len(set(ids)) != len(ids):
        raise ValueError("fragment_ids must be duplicate-free")
    frags = [store.get(fid, language) for fid in ids]

    toc_items = "\n".join(
        f'      <li><a href="#frag-{f.id}">{escape(f.title)}</a></li>' for f in frags
    )
    sections = "\n".join(
        f'    <section class="fragment" data-fragment="{f.id}">\n'
        f"{f.body_html}\n"
        f"    </section>"
        for f in frags
    )
    html = (
        "<!DOCTYPE html>\n"
        f'<html lang="{language.value}">\n'
        "<head>\n"
        '  <meta charset="utf-8">\n'
        f"  <title>{_DOC_TITLE[language]}</title>\n"
        f"  <style>\n{_DOC_CSS}  </style>\n"
        "</head>\n"
        "<body>\n"
        '  <nav class="toc">\n'
        f"    <h2>{_TOC_TITLE[language]}</h2>\n"
        "    <ol>\n"
        f"{toc_items}\n"
        "    </ol>\n"
        "  </nav>\n"
        "  <main>\n"
        f"{sections}\n"
        "  </main>\n"
        f"  <script>\n{_DOC_SCRIPT}  </script>\n"
        "</body>\n"
        "</html>\n"
    )
    return TailoredDocument(
        doc_id=doc_id_for(ids, language, store.corpus_version()),
        fragment_ids=tuple(ids),
        language=language,
        html=html,
        created_at=clock(),
    )


# --- QA context -------------------------------------------------------------------


class _SectionTextExtractor(HTMLParser):
    """Pulls normalized plain text per fragment section out of a stitched doc."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.sections: list[tuple[str, str]] = []
        self._current_id: str | None = None
        self._parts: list[str] = []
        self._depth = 0

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        attr_map = dict(attrs)
        if tag == "section" and attr_map.get("class") == "fragment":
            self._current_id = attr_map.get("data-fragment")
            self._parts = []
            self._depth = 1
            return
        if self._current_id is None:
            return
        if tag == "section":
            self._depth += 1
        if tag in BLOCK_TAGS or tag == "br":
            self._parts.append("\n")

    def handle_endtag(self, tag: str) -> None:
        if self._current_id is None:
            return
        if tag == "section":
            self._depth -= 1
            if self._depth == 0:
                self.sections.append((self._current_id, self._text()))
                self._current_id = None
            return
        if tag in BLOCK_TAGS:
            self._parts.append("\n")

    def handle_data(self, data: str) -> None:
        if self._current_id is not None:
            self._parts.append(data)

    def _text(self) -> str:
        lines = []
        for line in "".join(self._parts).split("\n"):
            collapsed = " ".join(line.split())
            if collapsed:
                lines.append(collapsed)
        return "\n".join(lines)


def fragment_text(body_html: str) -> str:
    """Plain-text extraction of one fragment body (tags stripped,
    whitespace normalized)."""
    extractor = _SectionTextExtractor()
    extractor.feed(
        f'<section class="fragment" data-fragment="x">{body_html}</section>'
    )
    extractor.close()
    return extractor.sections[0][1] if extractor.sections else ""


def qa_context(doc: TailoredDocument) -> str:
    """Marker-delimited plain text of the whole document, fragment order
    preserved: ``== <fragment_id> ==`` precedes each fragment's text."""
    extractor = _SectionTextExtractor()
    extractor.feed(doc.html)
    extractor.close()
    parts = [f"== {fid} ==\n{text}" for fid, text in extractor.sections]
    return "\n".join(parts)


# --- document cache ------------------------------------------------------------------


class DocumentCache:
    """Stitched documents by doc_id; atomic insert-if-absent."""

    def __init__(self, store: FragmentStore) -> None:
        self.store = store
        self._docs: dict[str, TailoredDocument] = {}
        self._lock = threading.Lock()

    def get_or_stitch(
        self,
        fragment_ids: list[str] | tuple[str, ...],
        language: Language,
        *,
        clock: Callable[[], str] = utc_now_rfc3339,
    ) -> TailoredDocument:
        doc_id = doc_id_for(list(fragment_ids), language, self.store.corpus_version())
        with self._lock:
            cached = self._docs.get(doc_id)
            if cached is not None:
                return cached
        doc = stitch(fragment_ids, language, self.store, clock=clock)
        with self._lock:
            return self._docs.setdefault(doc.doc_id, doc)

    def get(self, doc_id: str) -> TailoredDocument:
        doc = self._docs.get(doc_id)
        if doc is None:
            raise DocNotFound(f"no document {doc_id!r}", doc_id=doc_id)
        return doc

    def asset(self, doc_id: str, name: str) -> bytes:
        doc = self.get(doc_id)
        if name not in doc.asset_names() or name not in self.store.assets:
            raise DocNotFound(
                f"document {doc_id!r} has no asset {name!r}", doc_id=doc_id, asset=name
            )
        return self.store.assets[name]

    def materialize(self, doc_id: str, out_dir: str | Path) -> Path:
        """Write the document plus its asset folder for offline viewing."""
        doc = self.get(doc_id)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        html_path = out_dir / f"{doc_id}.html"
        html_path.write_text(doc.html, encoding="utf-8")
        names = doc.asset_names()
        if names:
            asset_dir = out_dir / "assets"
            asset_dir.mkdir(exist_ok=True)
            for name in names:
                (asset_dir / name).write_bytes(self.store.assets[name])
        return html_path


# --- corpus validation -----------------------------------------------------------------


def corpus_check(
    taxonomy: TaskTaxonomy,
    store: FragmentStore,
    languages: tuple[Language, ...] = (Language.EN, Language.ZH),
    *,
    require_parity: bool = True,
) -> list[str]:
    """Cross-check fragment resolution and language parity; returns problems."""
    problems: list[str] = []
    for sub in taxonomy.all_subtasks():
        for frag in sub.fragment_ids:
            for language in languages:
                if not store.has(frag, language):
                    problems.append(
                        f"subtask {sub.id!r}: fragment {frag!r} missing in "
                        f"language {language.value}"
                    )
    if require_parity and len(languages) > 1:
        reference = store.ids(languages[0])
        for language in languages[1:]:
            ids = store.ids(language)
            for missing in sorted(reference - ids):
                problems.append(
                    f"fragment {missing!r} present in {languages[0].value} "
                    f"but missing in {language.value}"
                )
            for extra in sorted(ids - reference):
                problems.append(
                    f"fragment {extra!r} present in {language.value} "
                    f"but missing in {languages[0].value}"
                )
    return problems

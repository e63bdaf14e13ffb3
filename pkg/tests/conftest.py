"""Shared fixtures: mini taxonomy/corpus, scripted backends, test doubles."""

from __future__ import annotations

from pathlib import Path

import pytest

from helmsman.doc_corpus import DocumentCache, FragmentStore, load_corpus
from helmsman.llm_gateway import CompletionRequest
from helmsman.taxonomy import TaskTaxonomy, load_taxonomy

FIXTURES = Path(__file__).parent / "fixtures"


class StaticBackend:
    """Backend double returning one canned string for every request."""

    def __init__(self, text: str) -> None:
        self.text = text
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> str:
        self.requests.append(request)
        return self.text


class SequenceBackend:
    """Backend double returning canned strings in order (last one repeats)."""

    def __init__(self, *texts: str) -> None:
        self.texts = list(texts)
        self.calls = 0

    def complete(self, request: CompletionRequest) -> str:
        text = self.texts[min(self.calls, len(self.texts) - 1)]
        self.calls += 1
        return text


@pytest.fixture()
def mini_taxonomy() -> TaskTaxonomy:
    return load_taxonomy(FIXTURES / "mini_taxonomy.txt")


@pytest.fixture()
def mini_store() -> FragmentStore:
    return load_corpus(FIXTURES / "mini_corpus")


@pytest.fixture()
def mini_cache(mini_store) -> DocumentCache:
    return DocumentCache(mini_store)


def make_script(tmp_path: Path, lines: list[str], name: str = "rules.script") -> Path:
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def fixed_clock() -> str:
    return "2026-01-01T00:00:00Z"

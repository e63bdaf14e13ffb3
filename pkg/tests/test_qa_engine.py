"""QA engine tests: grounding, bottleneck rules, augmentation store."""

from __future__ import annotations

import pytest

from conftest import StaticBackend, fixed_clock
from helmsman.errors import CorruptRecord
from helmsman.llm_gateway import ChatMessage, RecordingBackend, Role
from helmsman.qa_engine import (
    AugmentationRecord,
    AugmentationSource,
    AugmentationStore,
    BottleneckKind,
    QaExchange,
    answer,
    augment_from_log,
    detect_bottleneck,
    extract_citations,
    serialize_notes,
)

CONTEXT = "== footprints-intro ==\nOpen the footprint editor from the main window."


def exchange(grounded: bool) -> QaExchange:
    return QaExchange(
        question="q",
        answer="a",
        cited_fragments=("footprints-intro",) if grounded else (),
        grounded=grounded,
        timestamp=fixed_clock(),
    )


def record(content: str, n: int = 0) -> AugmentationRecord:
    return AugmentationRecord(
        record_id=f"rec-{n}",
        source=AugmentationSource.CHAT_LOG,
        topic_hint="",
        content=content,
        session_id="sess-test",
        created_at=fixed_clock(),
    )


class TestAnswer:
    def test_grounded_when_citation_in_context(self):
        backend = StaticBackend("Use the editor button [footprints-intro].")
        result = answer("how do I open the footprint editor", CONTEXT, [], backend)
        assert result.grounded is True
        assert result.cited_fragments == ("footprints-intro",)

    def test_ghost_citation_ungrounded(self):
        backend = StaticBackend("See [ghost-fragment] for details.")
        result = answer("anything", CONTEXT, [], backend)
        assert result.grounded is False
        assert result.cited_fragments == ()

    def test_mixed_citations_ungrounded(self):
        backend = StaticBackend("See [footprints-intro] and [ghost-fragment].")
        result = answer("anything", CONTEXT, [], backend)
        assert result.grounded is False

    def test_no_citation_means_ungrounded(self):
        backend = StaticBackend("I cannot find that in the documentation.")
        result = answer("anything", CONTEXT, [], backend)
        assert result.grounded is False

    def test_grounding_soundness_property(self):
        for reply in (
            "plain answer",
            "[footprints-intro] works",
            "[a] [b] [footprints-intro]",
            "[[footprints-intro]]",
        ):
            result = answer("q", CONTEXT, [], StaticBackend(reply))
            if result.grounded:
                assert result.cited_fragments
                for fid in result.cited_fragments:
                    assert f"== {fid} ==" in CONTEXT

    def test_prompt_contains_full_context(self):
        recorder = RecordingBackend(StaticBackend("ok [footprints-intro]"))
        answer("where is the editor", CONTEXT, [], recorder)
        prompt = recorder.prompts_text()[0]
        assert CONTEXT in prompt
        assert "where is the editor" in prompt

    def test_augmentations_serialized_into_prompt(self):
        recorder = RecordingBackend(StaticBackend("ok"))
        answer("q", CONTEXT, [record("shortcut is O")], recorder)
        prompt = recorder.prompts_text()[0]
        assert "Previously learned notes" in prompt
        assert "shortcut is O" in prompt

    def test_empty_question_rejected(self):
        with pytest.raises(ValueError):
            answer("  ", CONTEXT, [], StaticBackend("x"))


class TestCitations:
    def test_extract_dedupes_in_order(self):
        text = "see [frag-b] then [frag-a] then [frag-b] again"
        assert extract_citations(text) == ["frag-b", "frag-a"]

    def test_ignores_non_slug_brackets(self):
        assert extract_citations("[Not A Slug] [ok-slug]") == ["ok-slug"]


class TestNotes:
    def test_most_recent_first(self):
        notes = serialize_notes([record("first", 1), record("second", 2)])
        assert notes.index("second") < notes.index("first")

    def test_char_cap_drops_oldest(self):
        records = [record("x" * 900, n) for n in range(5)]
        notes = serialize_notes(records, char_cap=2000)
        assert notes.count("x" * 900) == 2

    def test_empty_records_empty_string(self):
        assert serialize_notes([]) == ""


class TestBottleneck:
    def test_three_consecutive_ungrounded(self):
        history = [exchange(True), exchange(False), exchange(False), exchange(False)]
        signal = detect_bottleneck(history, "normal question")
        assert signal is not None
        assert signal.kind is BottleneckKind.REPEATED_UNANSWERED

    def test_topic_marker(self):
        signal = detect_bottleneck([], "/topic gerber exports")
        assert signal is not None
        assert signal.kind is BottleneckKind.EXPLICIT_TOPIC_SHIFT

    def test_all_grounded_no_signal(self):
        history = [exchange(True)] * 5
        assert detect_bottleneck(history, "neutral text") is None

    def test_low_grounding_fraction(self):
        history = [
            exchange(False),
            exchange(False),
            exchange(True),
            exchange(False),
            exchange(False),
        ]
        # last three are not all ungrounded, so only the window rule fires
        signal = detect_bottleneck(history, "neutral")
        assert signal is not None
        assert signal.kind is BottleneckKind.LOW_GROUNDING

    def test_window_needs_to_fill(self):
        history = [exchange(False), exchange(True), exchange(False)]
        assert detect_bottleneck(history, "neutral") is None

    def test_marker_beats_other_rules(self):
        history = [exchange(False)] * 3
        signal = detect_bottleneck(history, "/topic something else")
        assert signal.kind is BottleneckKind.EXPLICIT_TOPIC_SHIFT


class TestAugmentFromLog:
    def log(self) -> list[ChatMessage]:
        return [
            ChatMessage(Role.USER, "how do teardrops work"),
            ChatMessage(Role.ASSISTANT, "they reinforce pad entries"),
        ]

    def test_two_lines_become_two_records(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        backend = StaticBackend("note one\nnote two")
        records = augment_from_log(
            self.log(), backend, session_id="s1", store=store
        )
        assert [r.content for r in records] == ["note one", "note two"]
        assert len(store) == 2

    def test_empty_response_zero_records(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        records = augment_from_log(
            self.log(), StaticBackend(""), session_id="s1", store=store
        )
        assert records == []
        assert len(store) == 0

    def test_append_only_across_runs(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        backend = StaticBackend("n1\nn2\nn3")
        augment_from_log(self.log(), backend, session_id="s1", store=store)
        augment_from_log(self.log(), backend, session_id="s1", store=store)
        assert len(store) == 6  # no dedup by design

    def test_max_notes_cap(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        backend = StaticBackend("\n".join(f"note {i}" for i in range(10)))
        records = augment_from_log(
            self.log(), backend, session_id="s1", store=store, max_notes=5
        )
        assert len(records) == 5

    def test_empty_log_rejected(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        with pytest.raises(ValueError):
            augment_from_log([], StaticBackend("x"), session_id="s1", store=store)


class TestAugmentationStore:
    def test_persists_and_reloads(self, tmp_path):
        path = tmp_path / "aug.jsonl"
        store = AugmentationStore(path)
        store.append(record("remember this", 1))
        reloaded = AugmentationStore(path)
        assert len(reloaded) == 1
        assert reloaded.records()[0].content == "remember this"

    def test_record_ids_unique(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        backend = StaticBackend("a\nb\nc")
        augment_from_log(
            [ChatMessage(Role.USER, "log")], backend, session_id="s", store=store
        )
        ids = [r.record_id for r in store.records()]
        assert len(ids) == len(set(ids))

    def test_corrupt_line_detected(self, tmp_path):
        path = tmp_path / "aug.jsonl"
        path.write_text('{"not": "a record"}\n', encoding="utf-8")
        with pytest.raises(CorruptRecord):
            AugmentationStore(path)

    def test_size_never_decreases(self, tmp_path):
        store = AugmentationStore(tmp_path / "aug.jsonl")
        sizes = [len(store)]
        for n in range(4):
            store.append(record(f"note {n}", n))
            sizes.append(len(store))
        assert sizes == sorted(sizes)

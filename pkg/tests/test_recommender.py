"""Recommender tests, checked against an independent brute-force scorer.

The oracle below deliberately re-implements tokenization, Jaccard and the
ranking order with plain loops so the production path has something
external to agree with.
"""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import StaticBackend
from helmsman.errors import AlreadyChosen, EmptyRegistry, NotRecommended
from helmsman.plugin_registry import (
    BindingKind,
    ExecutorBinding,
    PluginManifest,
    PluginOrigin,
    Registry,
)
from helmsman.recommender import (
    METHOD_LEXICAL,
    METHOD_LLM,
    METHOD_MANUAL,
    confirm,
    lexical_ranking,
    recommend,
)

# --- independent oracle -------------------------------------------------------


def oracle_tokens(text: str) -> set[str]:
    tokens: set[str] = set()
    word: list[str] = []

    def is_cjk(ch: str) -> bool:
        code = ord(ch)
        return 0x3400 <= code <= 0x9FFF or 0xF900 <= code <= 0xFAFF

    def flush() -> None:
        if word:
            tokens.add("".join(word))
            word.clear()

    for ch in text.casefold():
        if ch.isalnum() and ch != "_":
            word.append(ch)
            if is_cjk(ch):
                tokens.add(ch)
        else:
            flush()
    flush()
    return tokens


def oracle_jaccard(a: set[str], b: set[str]) -> float:
    union = 0
    inter = 0
    for token in a | b:
        union += 1
        if token in a and token in b:
            inter += 1
    if union == 0:
        return 0.0
    return inter / union


def oracle_ranking(need: str, registry: Registry) -> list[tuple[str, float]]:
    need_tokens = oracle_tokens(need)
    rows = []
    for manifest in registry.manifests():
        doc = manifest.description + " " + manifest.display_name
        rows.append((manifest.plugin_id, oracle_jaccard(need_tokens, oracle_tokens(doc))))
    return sorted(rows, key=lambda row: (-row[1], row[0]))


# --- fixtures ------------------------------------------------------------------


def plugin(pid: str, description: str, display_name: str | None = None) -> PluginManifest:
    return PluginManifest(
        plugin_id=pid,
        display_name=display_name or pid.replace("-", " ").title(),
        description=description,
        parameters=(),
        input_examples=(),
        binding=ExecutorBinding(BindingKind.BUILTIN_SIM),
        origin=PluginOrigin.USER_DEFINED,
    )


@pytest.fixture()
def spec_registry() -> Registry:
    registry = Registry()
    registry.register(plugin("round-tracker", "rounds sharp track corners"))
    registry.register(plugin("teardrop", "adds teardrops to pads"))
    registry.register(plugin("bom-export", "exports bill of materials"))
    return registry


WORDS = (
    "track corner round pad teardrop bom export gerber drill zone via "
    "silk label text board layer net copper 布线 敷铜 过孔 导出".split()
)


def random_registry(rng: random.Random, max_plugins: int = 50) -> Registry:
    registry = Registry()
    for i in range(rng.randint(1, max_plugins)):
        description = " ".join(rng.choices(WORDS, k=rng.randint(1, 10)))
        registry.register(plugin(f"plug-{i:03d}", description or "nothing"))
    return registry


# --- tests ------------------------------------------------------------------------


class TestLexical:
    def test_spec_example_top_match(self, spec_registry):
        rec = recommend("make my track corners round", spec_registry)
        assert rec.ranked[0][0] == "round-tracker"
        assert rec.method == METHOD_LEXICAL
        assert rec.ranked == tuple(
            oracle_ranking("make my track corners round", spec_registry)[:3]
        )

    def test_self_similarity_is_maximal(self, spec_registry):
        rec = recommend("adds teardrops to pads", spec_registry, top_k=3)
        top_id, top_score = rec.ranked[0]
        assert top_id == "teardrop"
        for _, score in rec.ranked[1:]:
            assert top_score >= score

    def test_identical_descriptions_tie_break_lexicographic(self):
        registry = Registry()
        registry.register(plugin("zeta-tool", "does the same thing", "Same"))
        registry.register(plugin("alpha-tool", "does the same thing", "Same"))
        rec = recommend("same thing", registry)
        assert rec.ranked[0][0] == "alpha-tool"
        assert rec.ranked[0][1] == rec.ranked[1][1]

    def test_score_bounds(self, spec_registry):
        for need in ("track", "完全不相关的需求", "round round round", "x"):
            for _, score in recommend(need, spec_registry).ranked:
                assert 0.0 <= score <= 1.0

    def test_permutation_invariance(self):
        specs = [
            ("round-tracker", "rounds sharp track corners"),
            ("teardrop", "adds teardrops to pads"),
            ("bom-export", "exports bill of materials"),
            ("via-stitch", "stitches ground with via arrays"),
        ]
        rankings = []
        for seed in range(3):
            rng = random.Random(seed)
            shuffled = specs[:]
            rng.shuffle(shuffled)
            registry = Registry()
            for pid, desc in shuffled:
                registry.register(plugin(pid, desc))
            rankings.append(tuple(lexical_ranking("round my track corners", registry)))
        assert len(set(rankings)) == 1

    def test_empty_registry_rejected(self):
        with pytest.raises(EmptyRegistry):
            recommend("anything", Registry())

    def test_empty_need_rejected(self, spec_registry):
        with pytest.raises(ValueError):
            recommend("   ", spec_registry)

    def test_oracle_equivalence_seeded(self):
        rng = random.Random(20260810)
        for _ in range(40):
            registry = random_registry(rng)
            need = " ".join(rng.choices(WORDS, k=rng.randint(1, 8)))
            assert lexical_ranking(need, registry) == oracle_ranking(need, registry)

    @settings(max_examples=100, deadline=None)
    @given(
        need=st.text(
            alphabet="abcdefghij 布线敷铜过孔0123!?-_",
            min_size=1,
            max_size=40,
        ),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_oracle_equivalence_fuzzed(self, need, seed):
        registry = random_registry(random.Random(seed), max_plugins=12)
        assert lexical_ranking(need, registry) == oracle_ranking(need, registry)


class TestLlmMethod:
    def test_positional_scores(self, spec_registry):
        backend = StaticBackend("teardrop, bom-export")
        rec = recommend("need", spec_registry, backend=backend, method=METHOD_LLM)
        assert rec.ranked == (("teardrop", 1.0), ("bom-export", 0.9))
        assert rec.method == METHOD_LLM

    def test_unknown_ids_repaired(self, spec_registry):
        backend = StaticBackend("ghost-plugin, round-tracker, round-tracker")
        rec = recommend("need", spec_registry, backend=backend, method=METHOD_LLM)
        assert rec.ranked == (("round-tracker", 1.0),)

    def test_garbage_falls_back_to_lexical(self, spec_registry):
        backend = StaticBackend("no ids at all here")
        rec = recommend(
            "make my track corners round", spec_registry, backend=backend, method=METHOD_LLM
        )
        assert rec.method == METHOD_LEXICAL
        assert rec.ranked[0][0] == "round-tracker"

    def test_top_k_truncation(self, spec_registry):
        backend = StaticBackend("round-tracker, teardrop, bom-export")
        rec = recommend(
            "need", spec_registry, backend=backend, method=METHOD_LLM, top_k=2
        )
        assert len(rec.ranked) == 2

    def test_prompt_lists_plugins(self, spec_registry):
        backend = StaticBackend("round-tracker")
        recommend("need words", spec_registry, backend=backend, method=METHOD_LLM)
        system = backend.requests[0].messages[0].content
        for pid in ("round-tracker", "teardrop", "bom-export"):
            assert pid in system


class TestConfirm:
    def test_confirm_ranked(self, spec_registry):
        rec = recommend("track corners round", spec_registry)
        confirmed = confirm(rec, rec.ranked[0][0])
        assert confirmed.chosen == rec.ranked[0][0]

    def test_confirm_unranked_rejected(self, spec_registry):
        rec = recommend("track corners round", spec_registry, top_k=1)
        with pytest.raises(NotRecommended):
            confirm(rec, "bom-export")

    def test_override_records_manual(self, spec_registry):
        rec = recommend("track corners round", spec_registry, top_k=1)
        confirmed = confirm(rec, "bom-export", override=True)
        assert confirmed.chosen == "bom-export"
        assert confirmed.method == METHOD_MANUAL

    def test_immutable_after_choice(self, spec_registry):
        rec = confirm(recommend("track", spec_registry), "round-tracker")
        with pytest.raises(AlreadyChosen):
            confirm(rec, "teardrop")

"""Plugin recommendation: an LLM-backed path and a deterministic lexical one.

The lexical path scores Jaccard overlap between the user's stated need and
each plugin's description plus display name, so rankings are transparent
and oracle-checkable. The LLM path asks the backend for an id list,
repairs it like the router does, and assigns positional scores; if repair
leaves nothing usable it falls back to the lexical ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import AlreadyChosen, EmptyRegistry, NotRecommended
from .lexical import jaccard, tokenize
from .llm_gateway import Backend, ChatMessage, CompletionRequest, PurposeTag, Role
from .plugin_registry import Registry
from .router import parse_id_list, repair_ids

DEFAULT_TOP_K = 3

METHOD_LLM = "llm"
METHOD_LEXICAL = "lexical"
METHOD_MANUAL = "manual"


@dataclass(frozen=True)
class Recommendation:
    ranked: tuple[tuple[str, float], ...]
    method: str
    chosen: str | None = None

    def ranked_ids(self) -> list[str]:
        return [plugin_id for plugin_id, _ in self.ranked]


def lexical_ranking(need: str, registry: Registry) -> list[tuple[str, float]]:
    """Full ranking: score descending, ties lexicographic by plugin id."""
    need_tokens = tokenize(need)
    scored = [
        (m.plugin_id, jaccard(need_tokens, tokenize(m.description + " " + m.display_name)))
        for m in registry.manifests()
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def _llm_ranking(
    need: str, registry: Registry, backend: Backend, top_k: int
) -> list[tuple[str, float]] | None:
    listing = "\n".join(
        f"{m.plugin_id}: {m.display_name}: {m.description}"
        for m in registry.manifests()
    )
    raw = backend.complete(
        CompletionRequest(
            messages=(
                ChatMessage(
                    Role.SYSTEM,
                    "Recommend the plugins that best align with the user's "
                    "objective. Reply with a comma-separated list of plugin "
                    "ids from this list, best first, nothing else.\n" + listing,
                ),
                ChatMessage(Role.USER, need),
            ),
            purpose_tag=PurposeTag.RECOMMEND,
        )
    )
    ids = repair_ids(parse_id_list(raw), set(registry.ids()), set(), limit=top_k)
    if not ids:
        return None
    return [(plugin_id, max(0.0, 1.0 - 0.1 * i)) for i, plugin_id in enumerate(ids)]


def recommend(
    need: str,
    registry: Registry,
    backend: Backend | None = None,
    method: str = METHOD_LEXICAL,
    *,
    top_k: int = DEFAULT_TOP_K,
) -> Recommendation:
    if not need.strip():
        raise ValueError("need must be non-empty")
    if len(registry) == 0:
        raise EmptyRegistry("no plugins registered")
    if method == METHOD_LLM:
        if backend is None:
            raise ValueError("llm method requires a backend")
        ranked = _llm_ranking(need, registry, backend, top_k)
        if ranked is not None:
            return Recommendation(ranked=tuple(ranked), method=METHOD_LLM)
        method = METHOD_LEXICAL  # model output unusable
    return Recommendation(
        ranked=tuple(lexical_ranking(need, registry)[:top_k]), method=METHOD_LEXICAL
    )


def confirm(
    recommendation: Recommendation, plugin_id: str, *, override: bool = False
) -> Recommendation:
    """Lock in the user's choice; override records a manual pick outside the
    ranked list."""
    if recommendation.chosen is not None:
        raise AlreadyChosen(
            f"recommendation already confirmed as {recommendation.chosen!r}",
            chosen=recommendation.chosen,
        )
    if plugin_id in recommendation.ranked_ids():
        return replace(recommendation, chosen=plugin_id)
    if override:
        return replace(recommendation, chosen=plugin_id, method=METHOD_MANUAL)
    raise NotRecommended(
        f"plugin {plugin_id!r} was not recommended", plugin_id=plugin_id
    )

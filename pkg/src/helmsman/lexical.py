"""Deterministic lexical matching used by routing fallback and the recommender.

Tokenization: casefold, split on non-alphanumeric runs (underscore splits
too); every CJK ideograph in the text is additionally emitted as its own
single-character token, so Chinese text matches without a segmenter.
Similarity is Jaccard over the resulting token sets.
"""

from __future__ import annotations

import re

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)
_CJK_RE = re.compile(r"[㐀-鿿豈-﫿]")


def tokenize(text: str) -> frozenset[str]:
    tokens: set[str] = set()
    for word in _WORD_RE.findall(text.casefold()):
        tokens.add(word)
        tokens.update(_CJK_RE.findall(word))
    return frozenset(tokens)


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def rank_by_overlap(query: str, candidates: dict[str, str]) -> list[tuple[str, float]]:
    """Score each candidate description against the query.

    Returns (id, score) pairs sorted by score descending, ties broken
    lexicographically by id.
    """
    query_tokens = tokenize(query)
    scored = [
        (cand_id, jaccard(query_tokens, tokenize(text)))
        for cand_id, text in candidates.items()
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored

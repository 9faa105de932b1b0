"""Okapi BM25 first-stage lexical ranking.

Used to pick the highest- and lowest-scoring responses from a pool as the
positive and negative few-shot examples for prompt construction, scored by
lexical match with the conversation history.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import Conversation

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    """Term-frequency saturation (k1) and length normalization (b)."""

    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError(f"k1 must be non-negative, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class ExamplePair:
    positive: str
    negative: str


class Bm25Index:
    """Immutable document-frequency index over a tokenized document pool."""

    def __init__(self, documents: Sequence[Sequence[str]]):
        self._term_counts = [Counter(doc) for doc in documents]
        self._lengths = [len(doc) for doc in documents]
        self.doc_count = len(self._term_counts)
        df: Counter[str] = Counter()
        for counts in self._term_counts:
            df.update(counts.keys())
        self._df = dict(df)
        total = sum(self._lengths)
        self.avg_doc_length = total / self.doc_count if self.doc_count else 0.0

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Bm25Index":
        return cls([tokenize(text) for text in texts])

    def doc_frequency(self, term: str) -> int:
        return self._df.get(term, 0)

    def term_frequency(self, term: str, doc_id: int) -> int:
        return self._term_counts[doc_id][term]

    def doc_length(self, doc_id: int) -> int:
        return self._lengths[doc_id]


def _idf(term: str, index: Bm25Index) -> float:
    # "+1 inside ln" variant: non-negative even for terms in every document,
    # so min/max example selection stays meaningful.
    df = index.doc_frequency(term)
    return math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))


def bm25_score(
    query: Sequence[str],
    doc_id: int,
    index: Bm25Index,
    params: Bm25Params = Bm25Params(),
) -> float:
    """Okapi BM25 score of one document for a tokenized query.

    Sum over query term occurrences of
    ``idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len/avglen))`` with
    ``idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))``. A term repeated in the
    query contributes once per occurrence.
    """
    if not 0 <= doc_id < index.doc_count:
        raise IndexError(f"doc_id {doc_id} out of range for {index.doc_count} documents")
    length = index.doc_length(doc_id)
    score = 0.0
    for term in query:
        tf = index.term_frequency(term, doc_id)
        if tf == 0:
            continue
        norm = 1.0 - params.b + params.b * length / index.avg_doc_length
        score += _idf(term, index) * (tf * (params.k1 + 1.0)) / (tf + params.k1 * norm)
    return score


def select_examples(
    history: Conversation,
    pool: Sequence[str],
    params: Bm25Params = Bm25Params(),
) -> ExamplePair:
    """Pick the best and worst pool responses by BM25 against the history.

    The query is the tokenized concatenation of all turn texts. Ties are
    broken by the lowest pool index, so a pool with no lexical overlap at all
    yields pool[0] for both sides.
    """
    if not pool:
        raise ValueError("example pool empty")
    index = Bm25Index.from_texts(pool)
    query = tokenize("\n".join(turn.text for turn in history.turns))
    scores = [bm25_score(query, i, index, params) for i in range(len(pool))]
    return ExamplePair(
        positive=pool[scores.index(max(scores))],
        negative=pool[scores.index(min(scores))],
    )


def teacher_response_pool(conversations: Sequence[Conversation]) -> list[str]:
    """Collect all teacher turn texts, the default pool for example selection."""
    from .corpus import Role

    return [
        turn.text
        for conversation in conversations
        for turn in conversation.turns
        if turn.role is Role.TEACHER
    ]

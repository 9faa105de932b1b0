"""Dual-encoder scoring and ranking of candidate responses.

Each candidate is scored against the conversation history twice: cosine
similarity of sentence-level embeddings, and cosine similarity of mean-pooled
token-level embeddings. The two similarities are combined (an even average by
default) and candidates are sorted by the combined score, descending, with
ties keeping their input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import Embedder


class DegenerateEmbeddingError(ValueError):
    """An embedding had zero norm; cosine similarity is undefined."""


@dataclass(frozen=True)
class Candidate:
    """One generated response with its provenance."""

    template_id: int
    attempt: int
    raw: str
    text: str


@dataclass(frozen=True)
class DualScore:
    sentence_sim: float
    token_sim: float
    combined: float


@dataclass(frozen=True)
class RankedCandidate:
    candidate: Candidate
    score: DualScore
    rank: int


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    """Component-wise mean of per-token embeddings across the token axis."""
    matrix = np.asarray(tokens, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError("mean_pool requires a non-empty (tokens, dim) array")
    return matrix.mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1] to absorb rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vector shapes differ: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding (zero norm)")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (norm_a * norm_b))))


def _combine(sentence_sim: float, token_sim: float, weight: float) -> float:
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must be in [0, 1], got {weight}")
    return weight * sentence_sim + (1.0 - weight) * token_sim


def _token_mean(embedder: Embedder, text: str) -> np.ndarray:
    return mean_pool(embedder.embed_tokens(text))


def dual_score(
    context_text: str,
    candidate_text: str,
    embedder: Embedder,
    weight: float = 0.5,
) -> DualScore:
    """Score one candidate against the context under both encoders."""
    if not context_text or not candidate_text:
        raise ValueError("context and candidate texts must be non-empty")
    sentence_vectors = embedder.embed_sentence([context_text, candidate_text])
    sentence_sim = cosine(sentence_vectors[0], sentence_vectors[1])
    token_sim = cosine(
        _token_mean(embedder, context_text), _token_mean(embedder, candidate_text)
    )
    return DualScore(
        sentence_sim=sentence_sim,
        token_sim=token_sim,
        combined=_combine(sentence_sim, token_sim, weight),
    )


@dataclass(frozen=True)
class EmbeddingDump:
    """Raw vectors backing one conversation's ranking, for external plotting."""

    context_sentence: np.ndarray
    context_token_mean: np.ndarray
    candidate_sentence: np.ndarray
    candidate_token_mean: np.ndarray


def _score_all(
    context_text: str,
    candidates: Sequence[Candidate],
    embedder: Embedder,
    weight: float,
) -> tuple[list[DualScore], EmbeddingDump]:
    if not candidates:
        raise ValueError("no candidates to rank")
    if not context_text:
        raise ValueError("context text must be non-empty")
    texts = [c.text for c in candidates]
    if any(not text for text in texts):
        raise ValueError("candidate texts must be non-empty")
    sentence_vectors = embedder.embed_sentence([context_text, *texts])
    context_token_mean = _token_mean(embedder, context_text)
    candidate_token_means = np.stack([_token_mean(embedder, text) for text in texts])
    scores = []
    for i in range(len(candidates)):
        sentence_sim = cosine(sentence_vectors[0], sentence_vectors[i + 1])
        token_sim = cosine(context_token_mean, candidate_token_means[i])
        scores.append(
            DualScore(sentence_sim, token_sim, _combine(sentence_sim, token_sim, weight))
        )
    dump = EmbeddingDump(
        context_sentence=sentence_vectors[0],
        context_token_mean=context_token_mean,
        candidate_sentence=sentence_vectors[1:],
        candidate_token_mean=candidate_token_means,
    )
    return scores, dump


def _order(scores: Sequence[DualScore]) -> list[int]:
    # sorted() is stable: equal combined scores keep candidate input order.
    return sorted(range(len(scores)), key=lambda i: -scores[i].combined)


def rank(
    context_text: str,
    candidates: Sequence[Candidate],
    embedder: Embedder,
    weight: float = 0.5,
) -> list[RankedCandidate]:
    """Rank candidates by combined similarity, descending; rank 1 is the output."""
    scores, _ = _score_all(context_text, candidates, embedder, weight)
    return [
        RankedCandidate(candidate=candidates[i], score=scores[i], rank=position + 1)
        for position, i in enumerate(_order(scores))
    ]


def rank_with_embeddings(
    context_text: str,
    candidates: Sequence[Candidate],
    embedder: Embedder,
    weight: float = 0.5,
) -> tuple[list[RankedCandidate], EmbeddingDump]:
    """Like rank(), also returning the vectors for an embedding export."""
    scores, dump = _score_all(context_text, candidates, embedder, weight)
    ranked = [
        RankedCandidate(candidate=candidates[i], score=scores[i], rank=position + 1)
        for position, i in enumerate(_order(scores))
    ]
    return ranked, dump

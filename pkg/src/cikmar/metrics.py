"""Evaluation of cleaned responses against references.

ROUGE-1/2/L/Lsum over the pipeline-wide tokenization, BERTScore-style greedy
token matching over provider embeddings (raw scores, no IDF weighting, no
baseline rescaling), and a mutual-information score from forward and reverse
perplexities.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import Direction, Embedder, LogProbScorer
from .bm25 import tokenize
from .reranker import DegenerateEmbeddingError


@dataclass(frozen=True)
class ComponentScores:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "ComponentScores":
        denom = precision + recall
        f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class RougeScores:
    rouge1: ComponentScores
    rouge2: ComponentScores
    rougeL: ComponentScores
    rougeLsum: ComponentScores

    def to_dict(self) -> dict:
        return {
            "rouge1": self.rouge1.to_dict(),
            "rouge2": self.rouge2.to_dict(),
            "rougeL": self.rougeL.to_dict(),
            "rougeLsum": self.rougeLsum.to_dict(),
        }


@dataclass(frozen=True)
class MutualInfoScore:
    value: float
    forward_ppl: float
    reverse_ppl: float

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "forward_ppl": self.forward_ppl,
            "reverse_ppl": self.reverse_ppl,
        }


@dataclass(frozen=True)
class EvalRow:
    conversation_id: str
    rouge: RougeScores | None = None
    bertscore: ComponentScores | None = None
    mutual_info: MutualInfoScore | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        if not self.ok:
            return {"conversation_id": self.conversation_id, "error": self.error}
        return {
            "conversation_id": self.conversation_id,
            "rouge": self.rouge.to_dict(),
            "bertscore": self.bertscore.to_dict(),
            "mutual_info": self.mutual_info.to_dict(),
        }


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    aggregates: dict[str, float] | None
    failed_count: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int) -> ComponentScores:
    """N-gram overlap with clipped counts (each reference n-gram matches at
    most its multiplicity)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngrams(tokenize(candidate), n)
    ref = _ngrams(tokenize(reference), n)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    return ComponentScores.from_pr(precision, recall)


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        row, prev = table[i], table[i - 1]
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = max(prev[j], row[j - 1])
    return table


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    return _lcs_table(a, b)[len(a)][len(b)]


def _lcs_match_indices(ref: Sequence[str], cand: Sequence[str]) -> set[int]:
    """Positions in ``ref`` matched by one longest common subsequence."""
    if not ref or not cand:
        return set()
    table = _lcs_table(ref, cand)
    matches = set()
    i, j = len(ref), len(cand)
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            matches.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return matches


def rouge_l(candidate: str, reference: str) -> ComponentScores:
    """Longest-common-subsequence overlap over token sequences."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    lcs = _lcs_length(cand, ref)
    precision = lcs / len(cand) if cand else 0.0
    recall = lcs / len(ref) if ref else 0.0
    return ComponentScores.from_pr(precision, recall)


def _sentences(text: str) -> list[list[str]]:
    return [tokens for line in text.split("\n") if (tokens := tokenize(line))]


def rouge_lsum(candidate: str, reference: str) -> ComponentScores:
    """Summary-level LCS: texts are split into sentences on newlines.

    For each reference sentence the union of LCS matches against every
    candidate sentence is taken; matched tokens are counted with clipping on
    both sides so no token is counted beyond its multiplicity.
    """
    ref_sents = _sentences(reference)
    cand_sents = _sentences(candidate)
    ref_total = sum(len(s) for s in ref_sents)
    cand_total = sum(len(s) for s in cand_sents)
    if ref_total == 0 or cand_total == 0:
        return ComponentScores.from_pr(0.0, 0.0)
    ref_counts = Counter(token for sent in ref_sents for token in sent)
    cand_counts = Counter(token for sent in cand_sents for token in sent)
    hits = 0
    for ref_sent in ref_sents:
        union: set[int] = set()
        for cand_sent in cand_sents:
            union |= _lcs_match_indices(ref_sent, cand_sent)
        for index in sorted(union):
            token = ref_sent[index]
            if ref_counts[token] > 0 and cand_counts[token] > 0:
                hits += 1
                ref_counts[token] -= 1
                cand_counts[token] -= 1
    return ComponentScores.from_pr(hits / cand_total, hits / ref_total)


def rouge_all(candidate: str, reference: str) -> RougeScores:
    return RougeScores(
        rouge1=rouge_n(candidate, reference, 1),
        rouge2=rouge_n(candidate, reference, 2),
        rougeL=rouge_l(candidate, reference),
        rougeLsum=rouge_lsum(candidate, reference),
    )


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("degenerate token embedding (zero norm)")
    return matrix / norms


def bertscore(candidate: str, reference: str, embedder: Embedder) -> ComponentScores:
    """Greedy maximum-cosine matching between token embeddings.

    Recall is the mean over reference tokens of the best cosine to any
    candidate token; precision is the converse; F1 is the harmonic mean.
    """
    if not candidate or not reference:
        raise ValueError("candidate and reference must be non-empty")
    cand = _unit_rows(np.asarray(embedder.embed_tokens(candidate), dtype=np.float64))
    ref = _unit_rows(np.asarray(embedder.embed_tokens(reference), dtype=np.float64))
    similarity = np.clip(cand @ ref.T, -1.0, 1.0)
    precision = float(similarity.max(axis=1).mean())
    recall = float(similarity.max(axis=0).mean())
    return ComponentScores.from_pr(precision, recall)


def mutual_info(context: str, response: str, scorer: LogProbScorer) -> MutualInfoScore:
    """Symmetric mutual-information score from forward and reverse scoring.

    The value is the mean of the two average token log-likelihoods, i.e.
    -(ln forward_ppl + ln reverse_ppl) / 2; higher means context and response
    predict each other more strongly.
    """
    if not context or not response:
        raise ValueError("context and response must be non-empty")
    forward = scorer.score_logprob(context, response, Direction.FORWARD)
    reverse = scorer.score_logprob(context, response, Direction.REVERSE)
    return MutualInfoScore(
        value=(forward.avg_token_logprob + reverse.avg_token_logprob) / 2.0,
        forward_ppl=forward.perplexity,
        reverse_ppl=reverse.perplexity,
    )


def score_response(
    conversation_id: str,
    context: str,
    response: str,
    reference: str,
    embedder: Embedder,
    scorer: LogProbScorer,
) -> EvalRow:
    """All metrics for one response; failures become an error row."""
    try:
        return EvalRow(
            conversation_id=conversation_id,
            rouge=rouge_all(response, reference),
            bertscore=bertscore(response, reference, embedder),
            mutual_info=mutual_info(context, response, scorer),
        )
    except Exception as exc:  # per-row isolation: one bad row must not kill a batch
        return EvalRow(conversation_id=conversation_id, error=str(exc) or repr(exc))


def _flatten(row: EvalRow) -> dict[str, float]:
    values: dict[str, float] = {}
    for name, scores in (
        ("rouge1", row.rouge.rouge1),
        ("rouge2", row.rouge.rouge2),
        ("rougeL", row.rouge.rougeL),
        ("rougeLsum", row.rouge.rougeLsum),
        ("bertscore", row.bertscore),
    ):
        values[f"{name}_precision"] = scores.precision
        values[f"{name}_recall"] = scores.recall
        values[f"{name}_f1"] = scores.f1
    values["mi_value"] = row.mutual_info.value
    values["mi_forward_ppl"] = row.mutual_info.forward_ppl
    values["mi_reverse_ppl"] = row.mutual_info.reverse_ppl
    return values


def aggregate(rows: Sequence[EvalRow]) -> EvalReport:
    """Arithmetic means over non-failed rows; no aggregates if all failed."""
    ok_rows = [row for row in rows if row.ok]
    failed = len(rows) - len(ok_rows)
    if not ok_rows:
        return EvalReport(rows=tuple(rows), aggregates=None, failed_count=failed)
    sums: dict[str, float] = {}
    for row in ok_rows:
        for key, value in _flatten(row).items():
            sums[key] = sums.get(key, 0.0) + value
    aggregates = {key: total / len(ok_rows) for key, total in sums.items()}
    return EvalReport(rows=tuple(rows), aggregates=aggregates, failed_count=failed)

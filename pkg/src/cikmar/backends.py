"""Wire-protocol clients for generation, embedding, and log-probability.

All three capabilities speak a minimal JSON-over-HTTP contract:

    POST /v1/generate  {"prompt", "max_new_tokens", "temperature", "top_k",
                        "top_p", "no_repeat_ngram", "sampling", "seed"}
                       -> {"text": string}
    POST /v1/embed     {"texts": [string], "granularity": "sentence"}
                       -> {"vectors": [[number]]}
                       {"text": string, "granularity": "token"}
                       -> {"vectors": [[number]]}   (one row per token)
    POST /v1/logprob   {"context": string, "continuation": string}
                       -> {"avg_logprob": number, "token_count": int}

A fully deterministic in-process stub implements the same capabilities so
the entire pipeline can run and be tested offline.
"""

from __future__ import annotations

import logging
import math
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np
import requests

from .prompts import ChatRequestText

logger = logging.getLogger(__name__)

STUB_DIM = 16
STUB_VOCAB_SIZE = 16
STUB_UNIFORM_LOGPROB = -math.log(16.0)

_M64 = (1 << 64) - 1


class BackendError(RuntimeError):
    """Base class for backend failures."""


class TransportError(BackendError):
    """The endpoint stayed unreachable or unsuccessful after all retries."""


class ProtocolError(BackendError):
    """The endpoint answered with a payload violating the wire contract."""


class Direction(Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 512
    temperature: float = 0.7
    top_k: int = 50
    top_p: float = 0.95
    no_repeat_ngram: int = 2
    sampling: bool = True
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.no_repeat_ngram < 0:
            raise ValueError("no_repeat_ngram must be non-negative")


@dataclass(frozen=True)
class LogProbResult:
    avg_token_logprob: float
    token_count: int

    def __post_init__(self) -> None:
        if self.avg_token_logprob > 0.0:
            raise ValueError("avg_token_logprob must be <= 0")
        if self.token_count < 1:
            raise ValueError("token_count must be positive")

    @property
    def perplexity(self) -> float:
        return math.exp(-self.avg_token_logprob)


class TextGenerator(Protocol):
    def generate(
        self, request: ChatRequestText, params: GenerationParams, attempts: int = 3
    ) -> list[str]: ...


class Embedder(Protocol):
    def embed_sentence(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_tokens(self, text: str) -> np.ndarray: ...


class LogProbScorer(Protocol):
    def score_logprob(
        self, context: str, continuation: str, direction: Direction
    ) -> LogProbResult: ...


@dataclass
class Backends:
    """The capability bundle a pipeline run needs."""

    generator: TextGenerator
    embedder: Embedder
    scorer: LogProbScorer | None = None


class HttpClient:
    """One endpoint; bounded in-flight requests, bounded retries with backoff."""

    def __init__(
        self,
        url: str,
        *,
        bearer_token: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        self.url = url
        self._bearer_token = bearer_token
        self._timeout = timeout
        self._retries = retries
        self._backoff = backoff
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()

    def post(self, payload: dict) -> dict:
        headers = {"X-Correlation-Id": uuid.uuid4().hex}
        if self._bearer_token:
            headers["Authorization"] = f"Bearer {self._bearer_token}"
        delay = self._backoff
        failure = "no attempt made"
        with self._semaphore:
            for attempt in range(self._retries + 1):
                try:
                    response = self._session.post(
                        self.url, json=payload, headers=headers, timeout=self._timeout
                    )
                except requests.RequestException as exc:
                    failure = f"transport error: {exc}"
                else:
                    if response.status_code == 200:
                        try:
                            body = response.json()
                        except ValueError as exc:
                            raise ProtocolError(f"{self.url}: non-JSON response: {exc}") from exc
                        if not isinstance(body, dict):
                            raise ProtocolError(f"{self.url}: response is not an object")
                        return body
                    failure = f"HTTP {response.status_code}"
                if attempt < self._retries:
                    logger.warning("%s: %s, retrying in %.2fs", self.url, failure, delay)
                    time.sleep(delay)
                    delay *= 2
        raise TransportError(f"{self.url}: {failure} after {self._retries + 1} attempts")


class HttpGenerator:
    """Client for the /v1/generate capability."""

    def __init__(self, url: str, **client_options):
        self._client = HttpClient(url, **client_options)

    def generate(
        self, request: ChatRequestText, params: GenerationParams, attempts: int = 3
    ) -> list[str]:
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        outputs = []
        for attempt in range(attempts):
            # Derive a distinct seed per attempt, otherwise a seeded server
            # would return three identical generations.
            seed = None if params.seed is None else params.seed + attempt
            body = self._client.post(
                {
                    "prompt": request.text,
                    "max_new_tokens": params.max_new_tokens,
                    "temperature": params.temperature,
                    "top_k": params.top_k,
                    "top_p": params.top_p,
                    "no_repeat_ngram": params.no_repeat_ngram,
                    "sampling": params.sampling,
                    "seed": seed,
                }
            )
            text = body.get("text")
            if not isinstance(text, str):
                raise ProtocolError(f"{self._client.url}: missing or non-string 'text'")
            outputs.append(text)
        return outputs


def _as_matrix(rows: object, url: str, expected_rows: int | None = None) -> np.ndarray:
    try:
        matrix = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"{url}: malformed 'vectors': {exc}") from exc
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise ProtocolError(f"{url}: 'vectors' must be a non-empty 2-d array")
    if expected_rows is not None and matrix.shape[0] != expected_rows:
        raise ProtocolError(
            f"{url}: expected {expected_rows} vectors, got {matrix.shape[0]}"
        )
    if not np.isfinite(matrix).all():
        raise ProtocolError(f"{url}: non-finite values in 'vectors'")
    return matrix


class HttpEmbedder:
    """Client for the /v1/embed capability, both granularities.

    The embedding dimension is pinned on first use per granularity; any later
    batch with a different dimension is a fatal protocol error.
    """

    def __init__(self, sentence_url: str, token_url: str, **client_options):
        self._sentence_client = HttpClient(sentence_url, **client_options)
        self._token_client = HttpClient(token_url, **client_options)
        self._dims: dict[str, int] = {}
        self._lock = threading.Lock()

    def _check_dim(self, granularity: str, dim: int, url: str) -> None:
        with self._lock:
            seen = self._dims.setdefault(granularity, dim)
        if seen != dim:
            raise ProtocolError(
                f"{url}: embedding dimension changed from {seen} to {dim}"
            )

    def embed_sentence(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("empty batch")
        if any(not text for text in texts):
            raise ValueError("empty text in batch")
        body = self._sentence_client.post({"texts": list(texts), "granularity": "sentence"})
        matrix = _as_matrix(body.get("vectors"), self._sentence_client.url, len(texts))
        self._check_dim("sentence", matrix.shape[1], self._sentence_client.url)
        return matrix

    def embed_tokens(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("empty text")
        body = self._token_client.post({"text": text, "granularity": "token"})
        matrix = _as_matrix(body.get("vectors"), self._token_client.url)
        self._check_dim("token", matrix.shape[1], self._token_client.url)
        return matrix


class HttpLogProbScorer:
    """Client for the /v1/logprob capability, one endpoint per direction.

    Forward scores the continuation given the context. Reverse swaps the two
    on the wire, so the reverse model scores the context given the response.
    """

    def __init__(
        self,
        forward_url: str | None,
        reverse_url: str | None,
        directions: Sequence[Direction] = (Direction.FORWARD, Direction.REVERSE),
        **client_options,
    ):
        self._clients: dict[Direction, HttpClient] = {}
        urls = {Direction.FORWARD: forward_url, Direction.REVERSE: reverse_url}
        for direction in directions:
            url = urls[direction]
            if url is None:
                raise ValueError(f"no endpoint configured for direction {direction.value}")
            self._clients[direction] = HttpClient(url, **client_options)

    def score_logprob(
        self, context: str, continuation: str, direction: Direction
    ) -> LogProbResult:
        if not context or not continuation:
            raise ValueError("context and continuation must be non-empty")
        client = self._clients.get(direction)
        if client is None:
            raise ValueError(f"direction {direction.value} not configured")
        if direction is Direction.FORWARD:
            payload = {"context": context, "continuation": continuation}
        else:
            payload = {"context": continuation, "continuation": context}
        body = client.post(payload)
        try:
            avg = float(body["avg_logprob"])
            count = int(body["token_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"{client.url}: malformed logprob response: {exc}") from exc
        try:
            return LogProbResult(avg_token_logprob=avg, token_count=count)
        except ValueError as exc:
            raise ProtocolError(f"{client.url}: {exc}") from exc


def _hash64(data: bytes, seed: int) -> int:
    """64-bit FNV-1a over the seed (8 bytes little-endian) then the data."""
    h = 0xCBF29CE484222325
    for byte in (seed & _M64).to_bytes(8, "little") + data:
        h ^= byte
        h = (h * 0x100000001B3) & _M64
    return h


def _splitmix64(state: int, count: int) -> list[int]:
    values = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        values.append(z ^ (z >> 31))
    return values


def _unit_vector(data: bytes, seed: int) -> np.ndarray:
    raw = _splitmix64(_hash64(data, seed), STUB_DIM)
    vector = np.array([v / 2**63 - 1.0 for v in raw], dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:  # unreachable in practice; keeps the contract total
        vector[0] = 1.0
        norm = 1.0
    return vector / norm


_STUB_VOCAB = (
    "lesson", "practice", "sentence", "question", "topic", "grammar",
    "example", "answer", "reading", "writing", "meaning", "correct",
    "review", "idea", "word", "focus",
)

# Markers that identify which ensemble template produced a prompt. Checked in
# this order because templates 2, 3, and 5 embed template 1's opening.
_TEMPLATE_MARKERS = (
    (2, "Good example:"),
    (3, "sounds like a teacher and one that sounds like a chatbot"),
    (4, "knowledgeable, authoritative"),
    (5, "exceptional teacher follow-up"),
    (1, "The following is a partial conversation"),
)


def template_id_of(prompt_text: str) -> int:
    """Best-effort template id for a rendered prompt; 0 if unrecognized."""
    for template_id, marker in _TEMPLATE_MARKERS:
        if marker in prompt_text:
            return template_id
    return 0


class StubBackend:
    """Deterministic offline stand-in for all three capabilities.

    Embeddings map each whitespace token to a unit vector of dimension 16
    drawn from a splitmix64 stream seeded by an FNV-1a hash of (seed, token
    bytes); sentence granularity hashes the whole text as one token.
    Generation emits a templated raw string (with the messy prefix/quote
    formatting the post-processor exists to remove) whose words are drawn
    from a fixed 16-word vocabulary. Log-probabilities are uniform over a
    16-symbol vocabulary: -ln(16) per token.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    # -- generation ---------------------------------------------------------

    def generate(
        self, request: ChatRequestText, params: GenerationParams, attempts: int = 3
    ) -> list[str]:
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        template_id = template_id_of(request.text)
        outputs = []
        for attempt in range(attempts):
            payload = request.text.encode("utf-8") + b"|" + attempt.to_bytes(4, "little")
            draws = _splitmix64(_hash64(payload, self.seed), 9)
            count = 4 + draws[0] % 5
            words = [_STUB_VOCAB[v % STUB_VOCAB_SIZE] for v in draws[1 : 1 + count]]
            body = " ".join(words)
            outputs.append(
                f'**Teacher:**\n\n"{body} (prompt {template_id}, attempt {attempt})"'
            )
        return outputs

    # -- embeddings ---------------------------------------------------------

    def embed_sentence(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("empty batch")
        if any(not text for text in texts):
            raise ValueError("empty text in batch")
        return np.stack([_unit_vector(text.encode("utf-8"), self.seed) for text in texts])

    def embed_tokens(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValueError("empty text")
        return np.stack([_unit_vector(token.encode("utf-8"), self.seed) for token in tokens])

    # -- log-probability ----------------------------------------------------

    def score_logprob(
        self, context: str, continuation: str, direction: Direction
    ) -> LogProbResult:
        if not context or not continuation:
            raise ValueError("context and continuation must be non-empty")
        scored = continuation if direction is Direction.FORWARD else context
        return LogProbResult(
            avg_token_logprob=STUB_UNIFORM_LOGPROB,
            token_count=max(1, len(scored.split())),
        )


def stub_backends(seed: int = 0) -> Backends:
    stub = StubBackend(seed=seed)
    return Backends(generator=stub, embedder=stub, scorer=stub)

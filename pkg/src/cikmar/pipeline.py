"""Batch orchestration: ingest -> ensemble -> generate -> rerank -> evaluate.

A run is driven by a RunConfig (flat JSON config file, every key overridable
by a ``CIKMAR_``-prefixed environment variable) and writes a resumable output
directory:

    <output_dir>/
      manifest        run config snapshot + per-conversation status
      rankings/       one line-delimited record per conversation
      finals/         rank-1 cleaned response per conversation
      eval/           per-row metric records + aggregate summary
      reports/        CSV summary and MI histogram data

Re-running skips conversations already Done; Failed ones are retried. In stub
mode every persisted byte is a pure function of (config, seed): manifest
timestamps come from a logical clock indexed by corpus position instead of
the wall clock.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bm25, metrics, postprocess, prompts, reranker
from .backends import (
    Backends,
    GenerationParams,
    HttpEmbedder,
    HttpGenerator,
    HttpLogProbScorer,
    stub_backends,
)
from .corpus import Conversation, Split, load_corpus

logger = logging.getLogger(__name__)

ENV_PREFIX = "CIKMAR_"

STATUS_PENDING = "pending"
STATUS_DONE = "done"
STATUS_FAILED = "failed"

RUN_NOTES = [
    "meta-question prompt (template 3): the model's first answer is used as the candidate",
    "all prompt/attempt generations are pooled into a single rerank per conversation",
]


class ConfigError(ValueError):
    """The run configuration is invalid or incomplete."""


class PipelineError(RuntimeError):
    """A per-conversation pipeline failure."""


@dataclass
class RunConfig:
    # corpus paths per split, and which split a run processes
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    split: str = "test"
    # backend endpoints; stub_mode replaces them with the deterministic stub
    generate_url: str | None = None
    embed_sentence_url: str | None = None
    embed_token_url: str | None = None
    logprob_forward_url: str | None = None
    logprob_reverse_url: str | None = None
    stub_mode: bool = False
    bearer_token: str | None = None
    retry_limit: int = 3
    retry_backoff: float = 0.5
    # generation sampling parameters
    max_new_tokens: int = 512
    temperature: float = 0.7
    top_k: int = 50
    top_p: float = 0.95
    no_repeat_ngram: int = 2
    sampling: bool = True
    seed: int | None = None
    attempts: int = 3
    # few-shot example selection
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    example_pool: str | None = None
    iterative_examples: bool = False
    prompts_dir: str | None = None
    # reranking and post-processing
    reranker_weight: float = 0.5
    strip_trailing_quote: bool = False
    dump_embeddings: str | None = None
    # execution
    concurrency: int = 4
    output_dir: str | None = None

    def corpus_path(self, split: str | None = None) -> str:
        split = split or self.split
        path = {
            "train": self.train_path,
            "dev": self.dev_path,
            "test": self.test_path,
        }.get(split)
        if path is None:
            raise ConfigError(f"no corpus path configured for split {split!r}")
        return path

    def generation_params(self) -> GenerationParams:
        return GenerationParams(
            max_new_tokens=self.max_new_tokens,
            temperature=self.temperature,
            top_k=self.top_k,
            top_p=self.top_p,
            no_repeat_ngram=self.no_repeat_ngram,
            sampling=self.sampling,
            seed=self.seed,
        )

    def bm25_params(self) -> bm25.Bm25Params:
        return bm25.Bm25Params(k1=self.bm25_k1, b=self.bm25_b)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, for_run: bool = True) -> None:
        if self.attempts < 1:
            raise ConfigError("attempts must be >= 1")
        if not 0.0 <= self.reranker_weight <= 1.0:
            raise ConfigError("reranker_weight must be in [0, 1]")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        try:
            self.generation_params()
            self.bm25_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not for_run:
            return
        if self.output_dir is None:
            raise ConfigError("output_dir is required")
        for name in ("train_path", "dev_path", "test_path", "example_pool", "prompts_dir"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        if not self.stub_mode:
            for name in ("generate_url", "embed_sentence_url", "embed_token_url"):
                if getattr(self, name) is None:
                    raise ConfigError(f"{name} is required unless stub_mode is on")
        self.corpus_path()
        if self.iterative_examples and self.example_pool is None and self.train_path is None:
            raise ConfigError("iterative_examples needs example_pool or train_path")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str) -> object:
    kind = _FIELD_TYPES[name]
    if raw.lower() in ("null", "none", ""):
        return None
    if kind in ("bool",):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {name}={raw!r}")
    if kind in ("int", "int | None"):
        return int(raw)
    if kind in ("float",):
        return float(raw)
    return raw


def apply_env_overrides(
    values: dict, environ: dict[str, str] | None = None
) -> dict:
    """Overlay CIKMAR_<FIELD> environment variables onto config values."""
    environ = os.environ if environ is None else environ
    merged = dict(values)
    for name in _FIELD_TYPES:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            merged[name] = _coerce(name, raw)
    return merged


def config_from_dict(values: dict, environ: dict[str, str] | None = None) -> RunConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = apply_env_overrides(values, environ)
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, environ: dict[str, str] | None = None) -> RunConfig:
    """Read a flat JSON config file and apply environment overrides."""
    path = Path(path)
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(values, environ)


def build_backends(config: RunConfig, need_scorer: bool = False) -> Backends:
    if config.stub_mode:
        return stub_backends(seed=config.seed or 0)
    options = {
        "bearer_token": config.bearer_token,
        "retries": config.retry_limit,
        "backoff": config.retry_backoff,
    }
    generator = HttpGenerator(config.generate_url, **options)
    embedder = HttpEmbedder(config.embed_sentence_url, config.embed_token_url, **options)
    scorer = None
    if need_scorer:
        if config.logprob_forward_url is None or config.logprob_reverse_url is None:
            raise ConfigError("logprob_forward_url and logprob_reverse_url are required")
        scorer = HttpLogProbScorer(
            config.logprob_forward_url, config.logprob_reverse_url, **options
        )
    return Backends(generator=generator, embedder=embedder, scorer=scorer)


# -- manifest -----------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    statuses: dict[str, dict] = field(default_factory=dict)
    notes: list[str] = field(default_factory=lambda: list(RUN_NOTES))
    created_at: str = ""

    def counts(self) -> dict[str, int]:
        out = {STATUS_PENDING: 0, STATUS_DONE: 0, STATUS_FAILED: 0}
        for entry in self.statuses.values():
            out[entry["status"]] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "statuses": self.statuses,
            "notes": self.notes,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(
            config=data["config"],
            statuses=data["statuses"],
            notes=data.get("notes", []),
            created_at=data.get("created_at", ""),
        )


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _json_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


def save_manifest(manifest: RunManifest, run_dir: Path) -> None:
    _atomic_write(run_dir / "manifest", json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_manifest(run_dir: Path) -> RunManifest:
    data = json.loads((run_dir / "manifest").read_text(encoding="utf-8"))
    return RunManifest.from_dict(data)


def _logical_clock(start: float = 0.0) -> Callable[[int], str]:
    def stamp(index: int) -> str:
        return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(start + index))

    return stamp


def _wall_clock() -> Callable[[int], str]:
    def stamp(index: int) -> str:
        return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    return stamp


# -- run ----------------------------------------------------------------------


def _load_example_pool(config: RunConfig) -> list[str]:
    if config.example_pool is not None:
        lines = Path(config.example_pool).read_text(encoding="utf-8").splitlines()
        pool = [line.strip() for line in lines if line.strip()]
    else:
        train = load_corpus(config.corpus_path("train"), Split.TRAIN)
        pool = bm25.teacher_response_pool(train)
    if not pool:
        raise ConfigError("example pool empty")
    return pool


def _ranking_record(conversation_id: str, ranked: Sequence[reranker.RankedCandidate]) -> dict:
    return {
        "conversation_id": conversation_id,
        "candidates": [
            {
                "template_id": rc.candidate.template_id,
                "attempt": rc.candidate.attempt,
                "text": rc.candidate.text,
                "sentence_sim": rc.score.sentence_sim,
                "token_sim": rc.score.token_sim,
                "combined": rc.score.combined,
                "rank": rc.rank,
            }
            for rc in ranked
        ],
    }


def _embedding_record(conversation_id: str, dump: reranker.EmbeddingDump,
                      candidates: Sequence[reranker.Candidate]) -> dict:
    return {
        "conversation_id": conversation_id,
        "context": {
            "sentence": dump.context_sentence.tolist(),
            "token_mean": dump.context_token_mean.tolist(),
        },
        "candidates": [
            {
                "template_id": candidate.template_id,
                "attempt": candidate.attempt,
                "sentence": dump.candidate_sentence[i].tolist(),
                "token_mean": dump.candidate_token_mean[i].tolist(),
            }
            for i, candidate in enumerate(candidates)
        ],
    }


def _process_conversation(
    conversation: Conversation,
    config: RunConfig,
    backends: Backends,
    templates: tuple[prompts.PromptTemplate, ...],
    pool: list[str] | None,
    run_dir: Path,
    want_embeddings: bool,
) -> dict | None:
    """Generate, clean, rank, and persist one conversation's outputs."""
    examples = None
    if config.iterative_examples:
        examples = bm25.select_examples(conversation, pool, config.bm25_params())
    ensemble = prompts.build_ensemble(conversation, examples, templates)
    params = config.generation_params()
    candidates: list[reranker.Candidate] = []
    for instance in ensemble:
        request = prompts.format_chat(instance)
        raws = backends.generator.generate(request, params, config.attempts)
        for attempt, raw in enumerate(raws):
            cleaned = postprocess.clean(raw, config.strip_trailing_quote)
            candidates.append(
                reranker.Candidate(
                    template_id=instance.template_id,
                    attempt=attempt,
                    raw=raw,
                    text=cleaned.text,
                )
            )
    rankable = [c for c in candidates if c.text]
    dropped = len(candidates) - len(rankable)
    if dropped:
        logger.warning(
            "conversation %s: %d empty candidates excluded from ranking",
            conversation.id, dropped,
        )
    if not rankable:
        raise PipelineError("all candidates empty after cleaning")
    context = prompts.render_conversation(conversation)
    embedding_record = None
    if want_embeddings:
        ranked, dump = reranker.rank_with_embeddings(
            context, rankable, backends.embedder, config.reranker_weight
        )
        embedding_record = _embedding_record(conversation.id, dump, rankable)
    else:
        ranked = reranker.rank(context, rankable, backends.embedder, config.reranker_weight)
    record = _ranking_record(conversation.id, ranked)
    if dropped:
        record["empty_candidates"] = dropped
    _atomic_write(run_dir / "rankings" / f"{conversation.id}.jsonl", _json_line(record))
    _atomic_write(run_dir / "finals" / f"{conversation.id}.txt", ranked[0].candidate.text + "\n")
    return embedding_record


def run(config: RunConfig, backends: Backends | None = None) -> RunManifest:
    """Execute the full pipeline over the configured split.

    Per-conversation failures are isolated and recorded in the manifest;
    conversations already Done in an existing manifest are skipped, Failed
    ones are retried. ``backends`` defaults to what the config describes.
    """
    config.validate(for_run=True)
    run_dir = Path(config.output_dir)
    for sub in ("rankings", "finals", "eval", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    conversations = load_corpus(config.corpus_path(), Split(config.split))
    order = {c.id: i for i, c in enumerate(conversations)}
    clock = _logical_clock() if config.stub_mode else _wall_clock()

    manifest_path = run_dir / "manifest"
    if manifest_path.exists():
        manifest = load_manifest(run_dir)
        manifest.config = config.to_dict()
    else:
        manifest = RunManifest(config=config.to_dict(), created_at=clock(0))
    statuses = {}
    for conversation in conversations:
        previous = manifest.statuses.get(conversation.id)
        if previous is not None and previous["status"] == STATUS_DONE:
            statuses[conversation.id] = previous
        else:
            statuses[conversation.id] = {"status": STATUS_PENDING, "updated_at": ""}
    manifest.statuses = statuses
    save_manifest(manifest, run_dir)

    if backends is None:
        backends = build_backends(config)
    templates = prompts.load_templates(config.prompts_dir, config.iterative_examples)
    pool = _load_example_pool(config) if config.iterative_examples else None
    todo = [c for c in conversations if statuses[c.id]["status"] == STATUS_PENDING]
    embedding_records: dict[str, dict] = {}

    def work(conversation: Conversation) -> tuple[str, dict | None, str | None]:
        try:
            record = _process_conversation(
                conversation, config, backends, templates, pool, run_dir,
                want_embeddings=config.dump_embeddings is not None,
            )
            return conversation.id, record, None
        except Exception as exc:  # isolate per-conversation failures
            logger.exception("conversation %s failed", conversation.id)
            return conversation.id, None, str(exc) or repr(exc)

    with ThreadPoolExecutor(max_workers=config.concurrency) as executor:
        for conversation_id, record, error in executor.map(work, todo):
            entry = statuses[conversation_id]
            if error is None:
                entry["status"] = STATUS_DONE
                entry.pop("reason", None)
                if record is not None:
                    embedding_records[conversation_id] = record
            else:
                entry["status"] = STATUS_FAILED
                entry["reason"] = error
            entry["updated_at"] = clock(order[conversation_id])
            save_manifest(manifest, run_dir)

    if config.dump_embeddings is not None and embedding_records:
        lines = [
            _json_line(embedding_records[c.id])
            for c in conversations
            if c.id in embedding_records
        ]
        _atomic_write(Path(config.dump_embeddings), "".join(lines))
    return manifest


# -- evaluate -----------------------------------------------------------------


def evaluate(
    run_dir: str | Path,
    references_path: str | Path,
    backends: Backends | None = None,
) -> metrics.EvalReport:
    """Score every final response in a run directory against its reference.

    Backends default to the ones described by the run's config snapshot (the
    stub in stub mode). The report is persisted under ``<run_dir>/eval/``.
    """
    run_dir = Path(run_dir)
    if not (run_dir / "manifest").exists():
        raise PipelineError(f"no run outputs in {run_dir} (missing manifest)")
    manifest = load_manifest(run_dir)
    final_paths = sorted((run_dir / "finals").glob("*.txt"))
    if not final_paths:
        raise PipelineError(f"no run outputs in {run_dir} (empty finals/)")
    if backends is None:
        config = config_from_dict(manifest.config, environ={})
        backends = build_backends(config, need_scorer=True)
    if backends.scorer is None:
        raise ConfigError("evaluate requires a log-probability scorer")

    references = {c.id: c for c in load_corpus(references_path)}
    finals = {path.stem: path.read_text(encoding="utf-8").rstrip("\n") for path in final_paths}
    ordered_ids = [cid for cid in manifest.statuses if cid in finals]
    ordered_ids += sorted(set(finals) - set(manifest.statuses))

    rows = []
    for conversation_id in ordered_ids:
        conversation = references.get(conversation_id)
        if conversation is None or conversation.reference is None:
            rows.append(metrics.EvalRow(conversation_id=conversation_id, error="no reference"))
            continue
        response = finals[conversation_id]
        if not response:
            rows.append(metrics.EvalRow(conversation_id=conversation_id, error="empty response"))
            continue
        rows.append(
            metrics.score_response(
                conversation_id,
                context=prompts.render_conversation(conversation),
                response=response,
                reference=conversation.reference,
                embedder=backends.embedder,
                scorer=backends.scorer,
            )
        )
    report = metrics.aggregate(rows)
    _atomic_write(
        run_dir / "eval" / "rows.jsonl",
        "".join(_json_line(row.to_dict()) for row in report.rows),
    )
    summary = {"aggregates": report.aggregates, "failed_count": report.failed_count}
    _atomic_write(run_dir / "eval" / "summary.json", json.dumps(summary, indent=2) + "\n")
    return report


def load_eval_report(run_dir: str | Path) -> tuple[list[dict], dict]:
    run_dir = Path(run_dir)
    rows_path = run_dir / "eval" / "rows.jsonl"
    summary_path = run_dir / "eval" / "summary.json"
    if not rows_path.exists() or not summary_path.exists():
        raise PipelineError(f"no evaluation report in {run_dir}")
    rows = [json.loads(line) for line in rows_path.read_text(encoding="utf-8").splitlines()]
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    return rows, summary


# -- report -------------------------------------------------------------------

MI_HISTOGRAM_BINS = 20


def _summary_csv(summary: dict) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["metric", "component", "mean"])
    aggregates = summary.get("aggregates") or {}
    for key, value in aggregates.items():
        metric, _, component = key.partition("_")
        writer.writerow([metric, component, repr(float(value))])
    return buffer.getvalue()


def _histogram_csv(rows: Sequence[dict]) -> str:
    values = [
        row["mutual_info"]["value"]
        for row in rows
        if "error" not in row and "mutual_info" in row
    ]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["bin_left", "bin_right", "count"])
    if values:
        counts, edges = np.histogram(np.asarray(values, dtype=np.float64),
                                     bins=MI_HISTOGRAM_BINS)
        for i, count in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(count)])
    return buffer.getvalue()


def report(run_dir: str | Path, fmt: str) -> list[Path]:
    """Emit deterministic report files from a persisted evaluation."""
    run_dir = Path(run_dir)
    rows, summary = load_eval_report(run_dir)
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = reports_dir / "summary.csv"
        _atomic_write(path, _summary_csv(summary))
    elif fmt == "histogram":
        path = reports_dir / "mi_histogram.csv"
        _atomic_write(path, _histogram_csv(rows))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return [path]

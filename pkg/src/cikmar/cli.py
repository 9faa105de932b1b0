"""Command-line interface: ingest, run, evaluate, report, clean-text.

Exit codes: 0 success, 1 usage or configuration error, 2 total run failure,
3 partial failure (some conversations Failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .corpus import CorpusError, Split, corpus_stats, load_corpus
from .pipeline import ConfigError, PipelineError
from .postprocess import clean

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TOTAL_FAILURE = 2
EXIT_PARTIAL_FAILURE = 3


class _Parser(argparse.ArgumentParser):
    # usage errors must exit 1, not argparse's default 2
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="cikmar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="validate a corpus file and print statistics")
    ingest.add_argument("--corpus", required=True, help="corpus file (line-delimited records)")
    ingest.add_argument("--split", default="train", choices=[s.value for s in Split])

    run = sub.add_parser("run", help="run the full generation pipeline")
    run.add_argument("--config", required=True, help="flat JSON config file")
    run.add_argument("--output-dir", help="override output directory")
    run.add_argument("--split", choices=[s.value for s in Split])
    run.add_argument("--seed", type=int)
    run.add_argument("--attempts", type=int)
    run.add_argument("--stub", action="store_true", help="use the deterministic stub backend")
    run.add_argument("--bm25-k1", type=float, dest="bm25_k1")
    run.add_argument("--bm25-b", type=float, dest="bm25_b")
    run.add_argument("--example-pool", dest="example_pool")
    run.add_argument("--prompts", dest="prompts_dir", help="template directory override")
    run.add_argument("--iterative-examples", action="store_true", dest="iterative_examples")
    run.add_argument("--strip-trailing-quote", action="store_true", dest="strip_trailing_quote")
    run.add_argument("--dump-embeddings", dest="dump_embeddings")
    run.add_argument("--concurrency", type=int)
    run.add_argument("--weight", type=float, dest="reranker_weight",
                     help="sentence-similarity weight in the combined score")

    evaluate = sub.add_parser("evaluate", help="score a run's final responses")
    evaluate.add_argument("--run-dir", required=True)
    evaluate.add_argument("--references", required=True,
                          help="corpus file providing the gold responses")

    report = sub.add_parser("report", help="emit CSV/histogram files from an evaluation")
    report.add_argument("--run-dir", required=True)
    report.add_argument("--format", required=True, choices=["csv", "histogram"])

    clean_text = sub.add_parser("clean-text", help="run the post-processing steps on raw text")
    clean_text.add_argument("file", nargs="?", help="input file (default: stdin)")
    clean_text.add_argument("--strip-trailing-quote", action="store_true")
    return parser


def _cmd_ingest(args: argparse.Namespace) -> int:
    conversations = load_corpus(args.corpus, Split(args.split))
    stats = corpus_stats(conversations)
    print(f"split: {args.split}")
    print(f"conversations: {stats.conversation_count}")
    print(f"teacher continuations: {stats.continuation_count}")
    print(f"teacher replies: {stats.reply_count}")
    print(f"continuation fraction: {stats.continuation_fraction:.4f}")
    return EXIT_OK


def _run_overrides(args: argparse.Namespace) -> dict:
    names = (
        "output_dir", "split", "seed", "attempts", "bm25_k1", "bm25_b",
        "example_pool", "prompts_dir", "dump_embeddings", "concurrency",
        "reranker_weight",
    )
    overrides = {n: getattr(args, n) for n in names if getattr(args, n) is not None}
    if args.stub:
        overrides["stub_mode"] = True
    if args.iterative_examples:
        overrides["iterative_examples"] = True
    if args.strip_trailing_quote:
        overrides["strip_trailing_quote"] = True
    return overrides


def _cmd_run(args: argparse.Namespace) -> int:
    config = pipeline.load_config(args.config)
    for name, value in _run_overrides(args).items():
        setattr(config, name, value)
    manifest = pipeline.run(config)
    counts = manifest.counts()
    print(f"done: {counts[pipeline.STATUS_DONE]}  failed: {counts[pipeline.STATUS_FAILED]}")
    if counts[pipeline.STATUS_DONE] == 0:
        return EXIT_TOTAL_FAILURE
    if counts[pipeline.STATUS_FAILED] > 0:
        return EXIT_PARTIAL_FAILURE
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    report = pipeline.evaluate(args.run_dir, args.references)
    summary = {"aggregates": report.aggregates, "failed_count": report.failed_count}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    for path in pipeline.report(args.run_dir, args.format):
        print(path)
    return EXIT_OK


def _cmd_clean_text(args: argparse.Namespace) -> int:
    if args.file:
        raw = Path(args.file).read_text(encoding="utf-8")
    else:
        raw = sys.stdin.read()
    result = clean(raw, args.strip_trailing_quote)
    print(result.text)
    steps = ", ".join(sorted(step.value for step in result.steps_applied)) or "none"
    print(f"steps applied: {steps}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "clean-text": _cmd_clean_text,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CorpusError, PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"cikmar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

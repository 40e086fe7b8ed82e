"""Command-line front door: ingest files, ask one-off questions, serve
the HTTP API, and run benchmark datasets.

Exit codes for `query`: 0 on an answer, 2 when the corpus has nothing
relevant, 1 on hard errors. All verbs share the same config resolution
as the service (YAML file plus FINRAG_* environment overrides).
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from .agents import PipelineError, run_pipeline
from .config import ConfigError, Runtime, build_runtime, load_config
from .ingest import IngestError, ingest_document

__all__ = ["main"]

logger = logging.getLogger(__name__)


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="path to a YAML config file")


def _runtime(args: argparse.Namespace) -> Runtime:
    return build_runtime(load_config(args.config))


def _cmd_ingest(args: argparse.Namespace) -> int:
    runtime = _runtime(args)
    failures = 0
    try:
        for raw_path in args.paths:
            path = Path(raw_path)
            try:
                content = path.read_text(encoding="utf-8")
                result = ingest_document(
                    path.name,
                    content,
                    runtime.store,
                    runtime.gateway,
                    registries=runtime.registries,
                    collection=args.collection,
                )
            except (OSError, ValueError, IngestError) as err:
                failures += 1
                print(f"{raw_path}: FAILED ({err})", file=sys.stderr)
                continue
            state = "replaced" if result.replaced else "indexed"
            flag = " [flagged: incomplete metadata]" if result.flagged else ""
            print(f"{raw_path}: {state} as {result.doc_id} ({result.chunk_count} chunks){flag}")
        runtime.flush_store()
    finally:
        runtime.close()
    return 1 if failures else 0


def _cmd_query(args: argparse.Namespace) -> int:
    runtime = _runtime(args)
    try:
        result = run_pipeline(args.text, runtime.deps)
    except PipelineError as err:
        print(f"error at stage {err.stage}: {err.cause}", file=sys.stderr)
        return 1
    finally:
        runtime.close()

    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    if result.no_answer or result.answer is None:
        print("No relevant content found for this question.")
        return 2

    answer = result.answer
    print(answer.rendered())
    print()
    total = result.usage
    print("Usage:")
    for stage, count in sorted(Counter(runtime.gateway.audit.stages()).items()):
        print(f"  {stage}: {count} call(s)")
    print(
        f"  tokens: {total.input_tokens} in / {total.output_tokens} out"
        f" (est. ${total.cost_usd:.4f})"
    )
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    runtime = _runtime(args)
    config = runtime.config
    host = args.host or config.host
    port = args.port if args.port is not None else config.port
    uvicorn.run(create_app(runtime), host=host, port=port, log_level="info")
    return 0


def _cmd_bench_run(args: argparse.Namespace) -> int:
    from .evalkit import load_dataset, run_benchmark

    runtime = _runtime(args)
    try:
        dataset = load_dataset(args.dataset)
        report = run_benchmark(
            dataset,
            runtime.deps,
            concurrency=args.concurrency,
            out_dir=args.out,
        )
    finally:
        runtime.close()
    print(report.table)
    if args.out:
        print(f"\nwrote records.jsonl, summary.json, report.txt to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finrag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p_ingest = sub.add_parser("ingest", help="index one or more Markdown files")
    p_ingest.add_argument("paths", nargs="+", metavar="path")
    p_ingest.add_argument("--collection", default="filings")
    _add_config_arg(p_ingest)
    p_ingest.set_defaults(func=_cmd_ingest)

    p_query = sub.add_parser("query", help="answer one question against the index")
    p_query.add_argument("text")
    _add_config_arg(p_query)
    p_query.set_defaults(func=_cmd_query)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)
    _add_config_arg(p_serve)
    p_serve.set_defaults(func=_cmd_serve)

    p_bench = sub.add_parser("bench", help="benchmark utilities")
    bench_sub = p_bench.add_subparsers(dest="bench_verb", required=True)
    p_run = bench_sub.add_parser("run", help="run a benchmark dataset")
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--concurrency", type=int, default=4)
    _add_config_arg(p_run)
    p_run.set_defaults(func=_cmd_bench_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

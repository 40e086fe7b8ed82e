"""Keeps the shipped sample corpus healthy: filings ingest cleanly, the
bench dataset's gold ids stay in sync with the files, and the sample
benchmark scores full marks offline."""
from __future__ import annotations

from pathlib import Path

import pytest

from finrag.agents import PipelineDeps, PipelineConfig
from finrag.corpus import make_doc_id
from finrag.evalkit import load_dataset, run_benchmark
from finrag.ingest import ingest_document
from finrag.store import HybridIndex

from test_agents import DIM, make_gateway

SAMPLE_DIR = Path(__file__).resolve().parent.parent / "sample_data"
FILINGS = sorted((SAMPLE_DIR / "filings").glob("*.md"))


@pytest.fixture(scope="module")
def seeded():
    store = HybridIndex(dim=DIM)
    gateway = make_gateway(models={"judge": "offline-judge"})
    results = {}
    for path in FILINGS:
        results[path.name] = ingest_document(
            path.name, path.read_text(encoding="utf-8"), store, gateway
        )
    return store, gateway, results


def test_five_filings_present():
    assert len(FILINGS) == 5


def test_filings_ingest_clean(seeded):
    _store, _gateway, results = seeded
    for name, result in results.items():
        assert result.flagged is False, f"{name} extracted without a date"
        assert result.meta.company_name, name
        assert result.meta.report_type, name
        assert result.chunk_count >= 1, name


def test_bench_gold_ids_match_files(seeded):
    dataset = load_dataset(str(SAMPLE_DIR / "bench.jsonl"))
    known = {
        make_doc_id(path.name, path.read_text(encoding="utf-8")) for path in FILINGS
    }
    assert len(dataset) == 5
    for question in dataset:
        assert question.gold_doc_id in known, f"{question.question_id} points at a stale doc id"


def test_sample_benchmark_is_all_correct(seeded):
    store, gateway, _results = seeded
    dataset = load_dataset(str(SAMPLE_DIR / "bench.jsonl"))
    deps = PipelineDeps(store=store, gateway=gateway, config=PipelineConfig())
    report = run_benchmark(dataset, deps, concurrency=4)
    assert report.summary["counts"]["Correct"] == 5, report.summary
    assert report.summary["hit@1"] == 1.0

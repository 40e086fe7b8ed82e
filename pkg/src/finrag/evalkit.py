"""Benchmark harness: judge labeling, retrieval metrics, and reports.

Evaluates a question set against the pipeline: each answer is labeled
Correct / Incorrect / FailureToAnswer by a judge agent (whose model must
differ from the writer's), retrieval quality is scored as Hit@k over the
ranked distinct documents, and the best retrieved chunk is compared to
the gold evidence by embedding cosine and by normalized Levenshtein
similarity over markdown-stripped text.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, field_validator

from .agents import NO_ANSWER_TEXT, PipelineDeps, run_pipeline
from .gateway import EmbeddingProvider, LlmGateway, UsageRecord, account, merge_usage

__all__ = [
    "BenchQuestion",
    "BenchReport",
    "EvalRecord",
    "JudgeVerdict",
    "LABELS",
    "QUESTION_TYPES",
    "hit_at_k",
    "judge",
    "levenshtein",
    "load_dataset",
    "max_chunk_similarity",
    "normalized_levenshtein",
    "run_benchmark",
    "strip_markdown",
    "summarize",
]

logger = logging.getLogger(__name__)

LABELS = ("Correct", "Incorrect", "FailureToAnswer")
QUESTION_TYPES = ("domain-relevant", "metrics-generated", "novel-generated")


class BenchQuestion(BaseModel):
    question_id: str
    question: str
    gold_answer: str
    gold_doc_id: str
    gold_evidence: str
    question_type: Literal["domain-relevant", "metrics-generated", "novel-generated"]

    @field_validator("question_id", "question", "gold_answer", "gold_doc_id", "gold_evidence")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("field must be non-empty")
        return v


@dataclass(frozen=True)
class JudgeVerdict:
    label: str
    explanation: str = ""

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class EvalRecord:
    question_id: str
    verdict: JudgeVerdict
    hit1: bool
    hit5: bool
    max_cosine: float
    max_levenshtein: float
    docs_retrieved: int
    chunks_retrieved: int
    usage: UsageRecord
    note: str = ""

    def __post_init__(self) -> None:
        if self.hit1 and not self.hit5:
            raise ValueError("hit1 implies hit5")
        if not (-1.0 <= self.max_cosine <= 1.0 + 1e-12):
            raise ValueError(f"max_cosine out of range: {self.max_cosine}")
        if not (0.0 <= self.max_levenshtein <= 1.0 + 1e-12):
            raise ValueError(f"max_levenshtein out of range: {self.max_levenshtein}")


# ---- judge ----

class JudgeOutput(BaseModel):
    verdict: Literal["Correct", "Incorrect", "FailureToAnswer"]
    reason: str = ""


def judge(
    question: str, gold_answer: str, system_answer: str, gateway: LlmGateway
) -> tuple[JudgeVerdict, UsageRecord]:
    out, usage = gateway.run_agent(
        "judge",
        {"question": question, "gold_answer": gold_answer, "answer": system_answer},
        JudgeOutput,
        stage="judge",
    )
    return JudgeVerdict(out.verdict, out.reason), usage


# ---- retrieval metrics ----

def hit_at_k(retrieved_doc_ids: Sequence[str], gold_doc_id: str, k: int) -> bool:
    """True iff the gold document appears among the first k distinct
    retrieved documents (dedup keeps first occurrence)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = list(dict.fromkeys(retrieved_doc_ids))
    return gold_doc_id in distinct[:k]


def levenshtein(a: str, b: str) -> int:
    """Edit distance; row-wise DP with the insertion pass folded into a
    prefix minimum so each row is a few vector ops."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(b) > len(a):
        a, b = b, a
    codes = np.array([ord(c) for c in b], dtype=np.int64)
    idx = np.arange(len(b) + 1, dtype=np.int64)
    prev = idx.copy()
    base = np.empty(len(b) + 1, dtype=np.int64)
    for i, ch in enumerate(a, start=1):
        cost = (codes != ord(ch)).astype(np.int64)
        base[0] = i
        np.minimum(prev[1:] + 1, prev[:-1] + cost, out=base[1:])
        shifted = base - idx
        np.minimum.accumulate(shifted, out=shifted)
        prev = shifted + idx
    return int(prev[-1])


def normalized_levenshtein(a: str, b: str) -> float:
    """1 - distance / max(len); two empty strings count as identical."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


_MD_ALIGN_ROW = re.compile(r"^\s*\|?[\s:|-]*-[\s:|-]*\|?\s*$")
_MD_IMAGE = re.compile(r"!\[([^\]]*)\]\([^)]*\)")
_MD_LINK = re.compile(r"\[([^\]]*)\]\([^)]*\)")
_MD_HEADING = re.compile(r"^\s{0,3}#{1,6}\s+")
_MD_EMPH_UNDER = re.compile(r"(?<![\w])_{1,2}([^_]+)_{1,2}(?![\w])")


def strip_markdown(text: str) -> str:
    """Plain text for similarity comparison: drop emphasis markers, heading
    hashes, table pipes and alignment rows, and link syntax (link text
    kept). Underscores inside identifiers are left alone."""
    out_lines = []
    for line in text.split("\n"):
        if "|" in line and _MD_ALIGN_ROW.match(line):
            continue
        line = _MD_HEADING.sub("", line)
        line = _MD_IMAGE.sub(r"\1", line)
        line = _MD_LINK.sub(r"\1", line)
        line = line.replace("*", "").replace("`", "")
        line = _MD_EMPH_UNDER.sub(r"\1", line)
        if "|" in line:
            line = line.replace("|", " ")
        line = " ".join(line.split())
        out_lines.append(line)
    return "\n".join(out_lines).strip()


def _unit(vec: Sequence[float]) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    return arr / norm if norm > 0 else arr


def max_chunk_similarity(
    chunks: Sequence[str], evidence: str, embedder: EmbeddingProvider
) -> tuple[float, float]:
    """Best chunk-vs-evidence similarity: cosine over embeddings of the raw
    chunk text, Levenshtein over the markdown-stripped chunk text."""
    if not evidence.strip():
        raise ValueError("evidence is empty")
    if not chunks:
        return 0.0, 0.0
    rows = embedder.embed_batch(list(chunks) + [evidence])
    ev_vec = _unit(rows[-1])
    max_cos = max(float(np.dot(_unit(row), ev_vec)) for row in rows[:-1])
    max_cos = min(1.0, max(-1.0, max_cos))
    max_lev = max(normalized_levenshtein(strip_markdown(c), evidence) for c in chunks)
    return max_cos, max_lev


# ---- benchmark runner ----

@dataclass
class BenchReport:
    records: list[EvalRecord]
    summary: dict
    table: str


def load_dataset(path: str | Path) -> list[BenchQuestion]:
    questions = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                questions.append(BenchQuestion.model_validate_json(line))
            except ValueError as err:
                raise ValueError(f"{path}:{line_no}: invalid question record: {err}") from err
    if not questions:
        raise ValueError(f"{path}: dataset is empty")
    return questions


def summarize(records: Sequence[EvalRecord], usage_records: Sequence[UsageRecord]) -> dict:
    """Order-independent aggregates over per-question records."""
    n = len(records)
    counts = {label: 0 for label in LABELS}
    for rec in records:
        counts[rec.verdict.label] += 1
    percentages = {label: round(100.0 * counts[label] / n, 1) for label in LABELS}
    accuracy = 100.0 * counts["Correct"] / n
    rel_cost = account(list(usage_records), accuracy) if accuracy > 0 and usage_records else None
    return {
        "questions": n,
        "counts": counts,
        "percentages": percentages,
        "hit@1": round(sum(r.hit1 for r in records) / n, 4),
        "hit@5": round(sum(r.hit5 for r in records) / n, 4),
        "avg_docs": round(sum(r.docs_retrieved for r in records) / n, 4),
        "avg_chunks": round(sum(r.chunks_retrieved for r in records) / n, 4),
        "mean_max_cosine": round(sum(r.max_cosine for r in records) / n, 4),
        "mean_max_levenshtein": round(sum(r.max_levenshtein for r in records) / n, 4),
        "relative_cost": rel_cost,
    }


def render_table(summary: dict) -> str:
    pct = summary["percentages"]
    counts = summary["counts"]
    rel = summary["relative_cost"]
    rows = [
        ("Correct", f"{pct['Correct']:.1f}%  ({counts['Correct']})"),
        ("Incorrect", f"{pct['Incorrect']:.1f}%  ({counts['Incorrect']})"),
        ("Failed to answer", f"{pct['FailureToAnswer']:.1f}%  ({counts['FailureToAnswer']})"),
        ("Relative cost", f"{rel:.3f}" if rel is not None else "n/a"),
        ("Hit@1", f"{summary['hit@1']:.2f}"),
        ("Hit@5", f"{summary['hit@5']:.2f}"),
        ("Avg distinct docs", f"{summary['avg_docs']:.2f}"),
        ("Avg chunks", f"{summary['avg_chunks']:.2f}"),
        ("Mean max cosine", f"{summary['mean_max_cosine']:.4f}"),
        ("Mean max Levenshtein", f"{summary['mean_max_levenshtein']:.4f}"),
    ]
    width = max(len(name) for name, _ in rows)
    head = f"Benchmark results ({summary['questions']} questions)"
    lines = [head, "-" * len(head)]
    lines += [f"{name:<{width}}  {value}" for name, value in rows]
    return "\n".join(lines)


def _record_to_json(rec: EvalRecord) -> str:
    return json.dumps(dataclasses.asdict(rec), sort_keys=True)


def run_benchmark(
    dataset: Sequence[BenchQuestion],
    deps: PipelineDeps,
    *,
    concurrency: int = 4,
    out_dir: str | Path | None = None,
) -> BenchReport:
    """Evaluate every question; a pipeline failure marks that question
    Incorrect and the run continues. The judge model must differ from the
    writer model."""
    if not dataset:
        raise ValueError("dataset is empty")
    gateway = deps.gateway
    judge_model = gateway.model_for("judge")
    if judge_model == gateway.model_for("writer"):
        raise ValueError(
            "judge model must differ from the writer model "
            f"(both are {judge_model!r}); configure a separate judge model"
        )

    pipeline_usage: list[UsageRecord] = []

    def eval_one(q: BenchQuestion) -> EvalRecord:
        note = ""
        try:
            result = run_pipeline(q.question, deps)
            answer_text = NO_ANSWER_TEXT if result.no_answer else result.answer.text
            retrieved = result.retrieved_docs
            chunk_texts = [deps.store.get_chunk(cid).text for cid in result.context_chunk_ids]
            usage = result.usage
            records = result.usage_records
        except Exception as err:  # noqa: BLE001 - one bad question must not kill the run
            logger.warning("pipeline failed for %s: %s", q.question_id, err)
            return EvalRecord(
                question_id=q.question_id,
                verdict=JudgeVerdict("Incorrect", f"pipeline failure: {err}"),
                hit1=False,
                hit5=False,
                max_cosine=0.0,
                max_levenshtein=0.0,
                docs_retrieved=0,
                chunks_retrieved=0,
                usage=merge_usage([]),
                note="pipeline failure",
            )
        pipeline_usage.extend(records)
        try:
            verdict, _judge_usage = judge(q.question, q.gold_answer, answer_text, gateway)
        except Exception as err:  # noqa: BLE001 - reported, run continues
            logger.warning("judge failed for %s: %s", q.question_id, err)
            verdict = JudgeVerdict("Incorrect", f"judge unavailable: {err}")
            note = "judge failure"
        max_cos, max_lev = max_chunk_similarity(chunk_texts, q.gold_evidence, gateway.embedder)
        if not chunk_texts:
            note = (note + "; " if note else "") + "no chunks retrieved"
        return EvalRecord(
            question_id=q.question_id,
            verdict=verdict,
            hit1=hit_at_k(retrieved, q.gold_doc_id, 1),
            hit5=hit_at_k(retrieved, q.gold_doc_id, 5),
            max_cosine=max_cos,
            max_levenshtein=max_lev,
            docs_retrieved=len(retrieved),
            chunks_retrieved=len(chunk_texts),
            usage=usage,
            note=note,
        )

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        records = list(pool.map(eval_one, dataset))

    summary = summarize(records, pipeline_usage)
    summary["judge_model"] = judge_model
    table = render_table(summary)
    report = BenchReport(records=records, summary=summary, table=table)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(_record_to_json(rec) + "\n")
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out / "report.txt", "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    return report

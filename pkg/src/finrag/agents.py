"""Question answering orchestration: plan, search, validate, write, route.

One pipeline run decomposes the question into sub-queries, fans out
search and validation per sub-query under a bounded thread pool, and
accumulates validator-approved chunks across up to max_rounds rounds
(replanning between rounds). The writer sees only approved chunks, in a
structured context of <source> blocks; arithmetic goes through the exact
calculator; the source list is rendered by code so citations always
resolve.
"""
from __future__ import annotations

import datetime as dt
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

from pydantic import BaseModel, Field

from .calculator import calculate
from .gateway import (
    ConcurrencyLimiter,
    GatewayError,
    LlmGateway,
    UsageRecord,
    merge_usage,
)
from .store import FilterOptions, HybridIndex, MetadataFilter, RankedHit

__all__ = [
    "Answer",
    "Citation",
    "ConversationTurn",
    "IntegrityError",
    "NO_ANSWER_TEXT",
    "PipelineConfig",
    "PipelineDeps",
    "PipelineError",
    "PipelineResult",
    "PipelineState",
    "SearchRequest",
    "SourceRef",
    "ValidatedChunk",
    "build_writer_input",
    "calculate",
    "plan",
    "prepare_search",
    "respond_direct",
    "route_message",
    "run_pipeline",
    "validate_chunks",
    "write_answer",
]

logger = logging.getLogger(__name__)

NO_ANSWER_TEXT = (
    "The available documents do not contain the information needed to answer this question."
)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline failed at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


class IntegrityError(RuntimeError):
    pass


# ---- types ----

@dataclass(frozen=True)
class SearchRequest:
    sub_query: str
    semantic_query: str
    keywords: tuple[str, ...]
    filters: MetadataFilter


@dataclass(frozen=True)
class ValidatedChunk:
    chunk_id: str
    doc_id: str
    sub_query: str
    text: str
    fused_score: float


@dataclass
class PipelineState:
    question: str
    sub_queries: list[str] = field(default_factory=list)
    validated: list[ValidatedChunk] = field(default_factory=list)
    round: int = 1
    max_rounds: int = 3
    max_reports: int = 5
    top_k: int = 10

    def __post_init__(self) -> None:
        if self.max_rounds < 1 or self.max_reports < 1 or self.top_k < 1:
            raise ValueError("max_rounds, max_reports, and top_k must all be >= 1")
        if not (1 <= self.round <= self.max_rounds):
            raise ValueError(f"round {self.round} outside [1, {self.max_rounds}]")


@dataclass(frozen=True)
class Citation:
    marker: int
    report_id: str
    excerpt_id: int


@dataclass(frozen=True)
class SourceRef:
    marker: int
    report_id: str
    title: str
    company: str
    date: str
    report_type: str


@dataclass(frozen=True)
class Answer:
    text: str
    citations: tuple[Citation, ...]
    sources: tuple[SourceRef, ...]
    usage: UsageRecord

    def rendered(self) -> str:
        """Answer text with the programmatic source list appended."""
        if not self.sources:
            return self.text
        lines = [f"[{s.marker}] {s.title}" + (f", {s.date}" if s.date else "") for s in self.sources]
        return self.text + "\n\nSources:\n" + "\n".join(lines)


@dataclass(frozen=True)
class ConversationTurn:
    conversation_id: str
    role: Literal["user", "assistant"]
    text: str
    retrieved_context_ref: str | None = None


@dataclass
class PipelineConfig:
    max_rounds: int = 3
    max_reports: int = 5
    top_k: int = 10
    concurrency: int = 12
    disable_planner: bool = False
    disable_validator: bool = False
    disable_metadata: bool = False
    # plain top-k retrieval straight to the writer: no planning, no
    # validation, no metadata filtering, one round
    naive_mode: bool = False

    def __post_init__(self) -> None:
        if self.naive_mode:
            self.disable_planner = True
            self.disable_validator = True
            self.disable_metadata = True
            self.max_rounds = 1
        if min(self.max_rounds, self.max_reports, self.top_k, self.concurrency) < 1:
            raise ValueError("pipeline config values must all be >= 1")


@dataclass
class PipelineDeps:
    store: HybridIndex
    gateway: LlmGateway
    config: PipelineConfig = field(default_factory=PipelineConfig)
    today: Callable[[], dt.date] = dt.date.today
    # instrumented cap on in-flight search tasks; deliberately distinct from
    # the gateway's provider-call limiter so the two never nest on one
    # semaphore
    search_limiter: ConcurrencyLimiter | None = None

    def __post_init__(self) -> None:
        if self.search_limiter is None:
            self.search_limiter = ConcurrencyLimiter(self.config.concurrency)


@dataclass
class PipelineResult:
    answer: Answer | None
    no_answer: bool
    state: PipelineState
    retrieved_docs: list[str]
    context_chunk_ids: list[str]
    usage_records: list[UsageRecord]
    warnings: list[str]

    @property
    def usage(self) -> UsageRecord:
        return merge_usage(self.usage_records)


# ---- agent output schemas ----

class PlanOutput(BaseModel):
    sub_queries: list[str] = Field(min_length=1)


class SearchDirective(BaseModel):
    semantic_query: str
    keywords: list[str] = Field(default_factory=list)
    company_names: list[str] = Field(default_factory=list)
    report_types: list[str] = Field(default_factory=list)
    date_start: dt.date | None = None
    date_end: dt.date | None = None


class ChunkVerdict(BaseModel):
    approved: bool
    reason: str = ""


class CalcRequest(BaseModel):
    placeholder: str
    expression: str
    bindings: dict[str, float] = Field(default_factory=dict)
    precision: int = 2


class WriterOutput(BaseModel):
    text: str
    citations: list[Citation] = Field(default_factory=list)
    calculations: list[CalcRequest] = Field(default_factory=list)


class RouteOutput(BaseModel):
    action: Literal["full_retrieval", "direct_answer"]
    reason: str = ""


class ResponderOutput(BaseModel):
    text: str


# ---- planning ----

def plan(question: str, gateway: LlmGateway) -> tuple[list[str], UsageRecord]:
    """Decompose the question into standalone sub-queries (singleton for
    simple questions)."""
    if not question.strip():
        raise ValueError("question is empty")
    try:
        out, usage = gateway.run_agent("planner", {"question": question}, PlanOutput, stage="plan")
    except Exception as err:
        raise PipelineError("plan", err) from err
    subs = [s.strip() for s in out.sub_queries if s.strip()] or [question.strip()]
    return subs, usage


def replan(
    question: str,
    prior_sub_queries: Sequence[str],
    round_stats: dict,
    gateway: LlmGateway,
    *,
    round_no: int,
) -> tuple[list[str], UsageRecord]:
    try:
        out, usage = gateway.run_agent(
            "replanner",
            {
                "question": question,
                "prior_sub_queries": list(prior_sub_queries),
                "stats": round_stats,
            },
            PlanOutput,
            stage="replan",
            round_no=round_no,
        )
    except Exception as err:
        raise PipelineError("replan", err) from err
    subs = [s.strip() for s in out.sub_queries if s.strip()]
    return subs or [question.strip()], usage


# ---- search preparation ----

def _months_back(day: dt.date, months: int) -> dt.date:
    month_index = day.year * 12 + (day.month - 1) - months
    year, month = divmod(month_index, 12)
    month += 1
    last_day = (dt.date(year + (month == 12), month % 12 + 1, 1) - dt.timedelta(days=1)).day
    return dt.date(year, month, min(day.day, last_day))


def prepare_search(
    sub_query: str,
    options: FilterOptions,
    gateway: LlmGateway,
    *,
    today: dt.date,
    disable_metadata: bool = False,
    round_no: int | None = None,
) -> tuple[SearchRequest, list[str], list[UsageRecord]]:
    """Turn a sub-query into an executable search request. Agent-proposed
    filter values are validated against the live options; exhausted retries
    degrade to an unfiltered request with a warning. A request naming no
    date gets the trailing-12-months window."""
    payload = {
        "sub_query": sub_query,
        "companies": list(options.companies),
        "report_types": list(options.report_types),
        "date_min": str(options.date_min) if options.date_min else None,
        "date_max": str(options.date_max) if options.date_max else None,
    }

    def check(directive: SearchDirective) -> None:
        unknown = set(directive.company_names) - set(options.companies)
        if unknown:
            raise ValueError(f"unknown company_names: {sorted(unknown)}")
        unknown = set(directive.report_types) - set(options.report_types)
        if unknown:
            raise ValueError(f"unknown report_types: {sorted(unknown)}")
        if (
            directive.date_start is not None
            and directive.date_end is not None
            and directive.date_start > directive.date_end
        ):
            raise ValueError("date_start is after date_end")

    warnings: list[str] = []
    usages: list[UsageRecord] = []
    try:
        directive, usage = gateway.run_agent(
            "search", payload, SearchDirective, validate=check,
            stage="prepare_search", round_no=round_no,
        )
        usages.append(usage)
    except GatewayError as err:
        failed_usage = getattr(err, "usage", None)
        if failed_usage is not None:
            usages.append(failed_usage)
        warning = f"search preparation failed for {sub_query!r}; searching unfiltered: {err}"
        logger.warning(warning)
        warnings.append(warning)
        keywords = tuple(dict.fromkeys(re.findall(r"[a-z0-9]+", sub_query.lower())))
        return SearchRequest(sub_query, sub_query, keywords, MetadataFilter()), warnings, usages

    if disable_metadata:
        filters = MetadataFilter()
    else:
        date_range = None
        if directive.date_start is not None or directive.date_end is not None:
            start = directive.date_start or directive.date_end
            end = directive.date_end or directive.date_start
            date_range = (start, end)
        else:
            date_range = (_months_back(today, 12), today)
        filters = MetadataFilter(
            company_names=frozenset(directive.company_names) if directive.company_names else None,
            report_types=frozenset(directive.report_types) if directive.report_types else None,
            date_range=date_range,
        )
    keywords = tuple(directive.keywords) or tuple(
        dict.fromkeys(re.findall(r"[a-z0-9]+", sub_query.lower()))
    )
    return SearchRequest(sub_query, directive.semantic_query or sub_query, keywords, filters), warnings, usages


# ---- validation ----

def validate_chunks(
    question: str,
    sub_query: str,
    hits: Sequence[RankedHit],
    store: HybridIndex,
    gateway: LlmGateway,
    *,
    round_no: int | None = None,
) -> tuple[list[RankedHit], list[UsageRecord]]:
    """Judge every hit independently and concurrently; approved hits keep
    their fused-score order. A failed judgment rejects that chunk only."""
    if not hits:
        return [], []

    def judge(hit: RankedHit):
        text = store.get_chunk(hit.chunk_id).text
        try:
            verdict, usage = gateway.run_agent(
                "validator",
                {"question": question, "sub_query": sub_query, "chunk_text": text},
                ChunkVerdict,
                stage="validate",
                round_no=round_no,
            )
            return bool(verdict.approved), usage
        except Exception as err:  # noqa: BLE001 - a failed judgment is a rejection
            logger.warning("validation failed for chunk %s: %s", hit.chunk_id, err)
            usage = getattr(err, "usage", None)
            return False, usage

    with ThreadPoolExecutor(max_workers=min(len(hits), 16)) as pool:
        outcomes = list(pool.map(judge, hits))
    approved = [hit for hit, (ok, _) in zip(hits, outcomes) if ok]
    usages = [u for _, u in outcomes if u is not None]
    return approved, usages


# ---- the pipeline ----

def run_pipeline(question: str, deps: PipelineDeps) -> PipelineResult:
    """Rounds of plan → (search, validate) → accumulate, replanning on
    empty rounds, up to max_rounds; NO_ANSWER exactly when nothing was
    approved by the final round."""
    config = deps.config
    store = deps.store
    gateway = deps.gateway
    usages: list[UsageRecord] = []
    warnings: list[str] = []

    if config.disable_planner:
        subs = [question.strip()]
    else:
        subs, usage = plan(question, gateway)
        usages.append(usage)

    state = PipelineState(
        question=question,
        sub_queries=list(subs),
        max_rounds=config.max_rounds,
        max_reports=config.max_reports,
        top_k=config.top_k,
    )
    all_sub_history: list[str] = list(subs)
    validated: list[ValidatedChunk] = []
    admitted: dict[str, ValidatedChunk] = {}
    admitted_docs: set[str] = set()
    retrieved_docs: list[str] = []
    retrieved_seen: set[str] = set()

    for round_no in range(1, config.max_rounds + 1):
        state.round = round_no
        state.sub_queries = list(subs)
        options = store.filter_options()
        today = deps.today()

        def search_task(item: tuple[int, str]):
            idx, sub = item
            with deps.search_limiter.slot():
                task_usages: list[UsageRecord] = []
                task_warnings: list[str] = []
                request = SearchRequest(sub, sub, (), MetadataFilter())
                try:
                    request, w, u = prepare_search(
                        sub, options, gateway,
                        today=today,
                        disable_metadata=config.disable_metadata,
                        round_no=round_no,
                    )
                    task_warnings.extend(w)
                    task_usages.extend(u)
                    [qvec] = gateway.embed([request.semantic_query])
                    hits = store.hybrid_search(
                        qvec, list(request.keywords), request.filters, k=config.top_k
                    )
                except Exception as err:  # noqa: BLE001 - degrade to an empty leg
                    msg = f"search failed for {sub!r}: {err}"
                    logger.warning(msg)
                    task_warnings.append(msg)
                    return idx, request, [], [], task_warnings, task_usages
                if config.disable_validator:
                    approved = list(hits)
                else:
                    approved, vu = validate_chunks(
                        question, sub, hits, store, gateway, round_no=round_no
                    )
                    task_usages.extend(vu)
                return idx, request, hits, approved, task_warnings, task_usages

        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(search_task, enumerate(subs)))
        outcomes.sort(key=lambda o: o[0])

        round_hits = 0
        round_approved = 0
        stats: dict[str, dict[str, int]] = {}
        admission_queue: list[tuple[int, RankedHit, str]] = []
        for idx, request, hits, approved, w, u in outcomes:
            warnings.extend(w)
            usages.extend(u)
            round_hits += len(hits)
            round_approved += len(approved)
            stats[request.sub_query] = {"hits": len(hits), "approved": len(approved)}
            for hit in hits:
                if hit.doc_id not in retrieved_seen:
                    retrieved_seen.add(hit.doc_id)
                    retrieved_docs.append(hit.doc_id)
            for hit in approved:
                admission_queue.append((idx, hit, request.sub_query))

        # deterministic merge: sub-query order, then fused score, then id
        admission_queue.sort(key=lambda t: (t[0], -t[1].fused_score, t[1].chunk_id))
        for idx, hit, sub in admission_queue:
            if hit.doc_id not in admitted_docs and len(admitted_docs) >= config.max_reports:
                continue
            key = hit.chunk_id
            if key in admitted:
                continue
            admitted_docs.add(hit.doc_id)
            vc = ValidatedChunk(
                chunk_id=hit.chunk_id,
                doc_id=hit.doc_id,
                sub_query=sub,
                text=store.get_chunk(hit.chunk_id).text,
                fused_score=hit.fused_score,
            )
            admitted[key] = vc
            validated.append(vc)

        state.validated = list(validated)
        if validated:
            break
        if round_no == config.max_rounds or config.disable_planner:
            break
        subs, usage = replan(question, all_sub_history, stats, gateway, round_no=round_no)
        usages.append(usage)
        all_sub_history.extend(subs)

    if not validated:
        return PipelineResult(
            answer=None,
            no_answer=True,
            state=state,
            retrieved_docs=retrieved_docs,
            context_chunk_ids=[],
            usage_records=usages,
            warnings=warnings,
        )

    context = build_writer_input(validated, store)
    answer, wu = write_answer(question, context, store, gateway)
    usages.extend(wu)
    answer = Answer(answer.text, answer.citations, answer.sources, merge_usage(usages))
    return PipelineResult(
        answer=answer,
        no_answer=False,
        state=state,
        retrieved_docs=retrieved_docs,
        context_chunk_ids=[vc.chunk_id for vc in validated],
        usage_records=usages,
        warnings=warnings,
    )


# ---- writer ----

def _attr(value: str) -> str:
    return str(value).replace('"', "'")


def build_writer_input(validated: Sequence[ValidatedChunk], store: HybridIndex) -> str:
    """Structured evidence context: one <source> block per report, groups
    ordered by best fused score, excerpts numbered in fused order.
    Deterministic; ties fall back to ids."""
    if not validated:
        raise ValueError("no validated chunks to build a context from")
    best: dict[str, ValidatedChunk] = {}
    for vc in validated:
        kept = best.get(vc.chunk_id)
        if kept is None or vc.fused_score > kept.fused_score:
            best[vc.chunk_id] = vc
    groups: dict[str, list[ValidatedChunk]] = {}
    for vc in best.values():
        groups.setdefault(vc.doc_id, []).append(vc)
    ordered_docs = sorted(
        groups, key=lambda d: (-max(vc.fused_score for vc in groups[d]), d)
    )
    blocks = []
    for doc_id in ordered_docs:
        try:
            rec = store.get_document(doc_id)
        except KeyError as err:
            raise IntegrityError(f"validated chunk references missing document {doc_id!r}") from err
        meta = rec.meta
        excerpts = sorted(groups[doc_id], key=lambda vc: (-vc.fused_score, vc.chunk_id))
        lines = [
            f'<source id="{_attr(doc_id)}" title="{_attr(meta.title)}" '
            f'company="{_attr(meta.company_name)}" date="{_attr(meta.date or "")}" '
            f'report_type="{_attr(meta.report_type)}">'
        ]
        for i, vc in enumerate(excerpts, start=1):
            lines.append(f"Excerpt {i}:")
            lines.append(vc.text)
        lines.append("</source>")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


_SOURCE_ID_RE = re.compile(r'<source id="([^"]+)"')
_MARKER_RE = re.compile(r"\[(\d+)\]")
_PLACEHOLDER_RE = re.compile(r"\{\{calc:([A-Za-z0-9_]+)\}\}")


def _writer_check(context: str, calculator: Callable[..., float] = calculate):
    source_ids = set(_SOURCE_ID_RE.findall(context))

    def check(out: WriterOutput) -> None:
        text_markers = {int(m) for m in _MARKER_RE.findall(out.text)}
        cited = {c.marker for c in out.citations}
        if len(cited) != len(out.citations):
            raise ValueError("duplicate citation markers")
        missing = text_markers - cited
        if missing:
            raise ValueError(f"markers {sorted(missing)} in text lack citation entries")
        dangling = cited - text_markers
        if dangling:
            raise ValueError(f"citation markers {sorted(dangling)} never appear in the text")
        for c in out.citations:
            if c.report_id not in source_ids:
                raise ValueError(f"citation [{c.marker}] names unknown source {c.report_id!r}")
            if c.excerpt_id < 1:
                raise ValueError("excerpt_id must be >= 1")
        placeholders = set(_PLACEHOLDER_RE.findall(out.text))
        declared = {c.placeholder for c in out.calculations}
        if placeholders != declared:
            raise ValueError(
                f"calc placeholders in text {sorted(placeholders)} do not match "
                f"declared calculations {sorted(declared)}"
            )
        for c in out.calculations:
            # CalcError is a ValueError, so a broken formula re-enters the
            # correction cycle instead of crashing the pipeline
            calculator(c.expression, c.bindings, c.precision)

    return check


def write_answer(
    question: str,
    context: str,
    store: HybridIndex,
    gateway: LlmGateway,
    calculator: Callable[..., float] = calculate,
) -> tuple[Answer, list[UsageRecord]]:
    """Run the writer on the structured context; substitute calculator
    results for {{calc:...}} placeholders; append the source list
    programmatically."""
    if not context.strip():
        return Answer(NO_ANSWER_TEXT, (), (), merge_usage([])), []
    try:
        out, usage = gateway.run_agent(
            "writer",
            {"question": question, "context": context},
            WriterOutput,
            validate=_writer_check(context, calculator),
            stage="write",
        )
    except Exception as err:
        raise PipelineError("write", err) from err

    text = out.text
    for calc in out.calculations:
        value = calculator(calc.expression, calc.bindings, calc.precision)
        rendered = f"{value:.{calc.precision}f}" if calc.precision > 0 else f"{value:.0f}"
        text = text.replace("{{calc:" + calc.placeholder + "}}", rendered)

    citations = tuple(sorted(out.citations, key=lambda c: c.marker))
    sources = []
    for c in citations:
        rec = store.get_document(c.report_id)
        sources.append(
            SourceRef(
                marker=c.marker,
                report_id=c.report_id,
                title=rec.meta.title,
                company=rec.meta.company_name,
                date=str(rec.meta.date) if rec.meta.date else "",
                report_type=rec.meta.report_type,
            )
        )
    answer = Answer(text, citations, tuple(sources), usage)
    return answer, [usage]


# ---- conversation routing ----

def route_message(
    turn: ConversationTurn,
    history: Sequence[ConversationTurn],
    deps: PipelineDeps,
) -> Literal["full_retrieval", "direct_answer"]:
    """First message always takes the full pipeline; afterwards the router
    agent decides, falling back to full retrieval on any failure."""
    prior = [t for t in history if t.role == "assistant"]
    if not prior:
        return "full_retrieval"
    try:
        options = deps.store.filter_options()
        out, _usage = deps.gateway.run_agent(
            "router",
            {
                "message": turn.text,
                "history": [{"role": t.role, "text": t.text} for t in history],
                "companies": list(options.companies),
                "is_first_message": False,
            },
            RouteOutput,
            stage="route",
        )
        return out.action
    except Exception as err:  # noqa: BLE001 - conservative fallback
        logger.warning("routing failed (%s); falling back to full retrieval", err)
        return "full_retrieval"


def respond_direct(
    message: str, prior_answer: str, gateway: LlmGateway
) -> tuple[str, UsageRecord]:
    """Rework the prior answer without touching the index."""
    out, usage = gateway.run_agent(
        "responder",
        {"message": message, "prior_answer": prior_answer},
        ResponderOutput,
        stage="respond",
    )
    return out.text, usage

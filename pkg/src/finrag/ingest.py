"""Document ingestion: normalize, extract metadata, chunk, embed, index.

One call takes raw Markdown from upload or disk to a fully indexed
document. Metadata extraction degrades to placeholder-and-flag instead of
aborting, company names are canonicalized against what the store already
knows (with optional registry fallback), and every hard failure carries
the stage it happened in so callers can report something more useful than
a bare traceback.
"""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass

from .corpus import ChunkParams, Document, chunk_document, make_doc_id, merge_table_chunks, normalize_markdown
from .extractor import RegistryClients, compose_title, extract_or_placeholder, normalize_company, take_prefix
from .gateway import LlmGateway
from .store import HybridIndex, ReportMetadata

__all__ = ["IngestError", "IngestResult", "ingest_document"]

logger = logging.getLogger(__name__)


class IngestError(RuntimeError):
    """Ingestion failed at a known stage ("extract", "chunk", "embed", "index")."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"ingest failed at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class IngestResult:
    doc_id: str
    meta: ReportMetadata
    chunk_count: int
    flagged: bool
    replaced: bool


def _canonicalize_company(
    meta: ReportMetadata,
    store: HybridIndex,
    registries: RegistryClients | None,
    source_name: str,
) -> ReportMetadata:
    if not meta.company_name.strip():
        return meta
    match = normalize_company(meta.company_name, store, registries)
    if match.canonical != meta.company_name:
        logger.info(
            "company %r canonicalized to %r via %s", meta.company_name, match.canonical, match.source
        )
        meta = meta.model_copy(update={"company_name": match.canonical})
        # title embeds the company name, so recompose it from the canonical form
        meta = compose_title(meta, fallback=meta.title or source_name)
    return meta


def ingest_document(
    source_name: str,
    content: str,
    store: HybridIndex,
    gateway: LlmGateway,
    *,
    registries: RegistryClients | None = None,
    collection: str = "filings",
    params: ChunkParams | None = None,
    now: dt.datetime | None = None,
) -> IngestResult:
    """Normalize, extract, chunk, embed, and index one document.

    Raises ValueError when the content is empty after normalization and
    IngestError (with a .stage attribute) when a pipeline stage fails hard.
    Re-ingesting identical content under the same source name replaces the
    stored version; the result's ``replaced`` flag reports which happened.
    """
    params = params or ChunkParams()
    normalized = normalize_markdown(content)
    if not normalized.strip():
        raise ValueError(f"document {source_name!r} is empty after normalization")

    doc_id = make_doc_id(source_name, content)
    stamp = now if now is not None else dt.datetime.now(dt.timezone.utc)
    doc = Document(
        doc_id=doc_id,
        source_name=source_name,
        content=normalized,
        collection=collection,
        ingested_at=stamp.isoformat(timespec="seconds"),
    )

    try:
        prefix = take_prefix(doc)
        meta, flagged = extract_or_placeholder(prefix, gateway, source_name=source_name)
        meta = _canonicalize_company(meta, store, registries, source_name)
    except Exception as err:
        raise IngestError("extract", err) from err

    try:
        chunks = merge_table_chunks(chunk_document(doc, params), params)
    except Exception as err:
        raise IngestError("chunk", err) from err

    try:
        # one batch: the prefix embedding doubles as the document vector
        vectors = gateway.embed([prefix] + [c.text for c in chunks])
    except Exception as err:
        raise IngestError("embed", err) from err
    doc_vec, chunk_vecs = vectors[0], vectors[1:]

    try:
        store.get_document(doc_id)
        replaced = True
    except KeyError:
        replaced = False

    try:
        store.upsert_document(doc, meta, chunks, doc_vec, chunk_vecs, flagged=flagged)
    except Exception as err:
        raise IngestError("index", err) from err

    logger.info(
        "ingested %s as %s: %d chunks, flagged=%s, replaced=%s",
        source_name,
        doc_id,
        len(chunks),
        flagged,
        replaced,
    )
    return IngestResult(doc_id, meta, len(chunks), flagged, replaced)

"""HTTP service: the exact contract the chat UI consumes.

Endpoints: POST /documents, POST /conversations, POST
/conversations/{id}/messages (server-sent events), GET /companies, GET
/documents, GET /filters, GET /health. Assistant turns are persisted
before streaming starts, so the concatenated delta frames always equal
the stored text.
"""
from __future__ import annotations

import json
import logging
from typing import Iterator

from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from .agents import (
    NO_ANSWER_TEXT,
    Answer,
    ConversationTurn,
    PipelineError,
    respond_direct,
    route_message,
    run_pipeline,
)
from .config import Runtime
from .ingest import IngestError, ingest_document
from .store import ReportMetadata

__all__ = ["create_app"]

logger = logging.getLogger(__name__)

_TEXT_SUFFIXES = (".md", ".markdown", ".txt")
_FRAME_WIDTH = 64


class ConversationCreate(BaseModel):
    title: str = ""


class MessageIn(BaseModel):
    text: str = Field(min_length=1)


def _meta_payload(meta: ReportMetadata) -> dict:
    return meta.model_dump(mode="json")


def _sse(event: str, payload: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(payload, separators=(',', ':'))}\n\n"


def _pieces(text: str, width: int = _FRAME_WIDTH) -> Iterator[str]:
    for start in range(0, len(text), width):
        yield text[start : start + width]


def _answer_payload(conversation_id: str, answer: Answer, *, no_answer: bool) -> dict:
    return {
        "conversation_id": conversation_id,
        "no_answer": no_answer,
        "citations": [
            {"marker": c.marker, "report_id": c.report_id, "excerpt_id": c.excerpt_id}
            for c in answer.citations
        ],
        "sources": [
            {
                "marker": s.marker,
                "report_id": s.report_id,
                "title": s.title,
                "company": s.company,
                "date": s.date,
                "report_type": s.report_type,
            }
            for s in answer.sources
        ],
        "usage": {
            "input_tokens": answer.usage.input_tokens,
            "output_tokens": answer.usage.output_tokens,
            "model_id": answer.usage.model_id,
            "cost_usd": answer.usage.cost_usd,
        },
    }


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="finrag", version=runtime.version, docs_url=None, redoc_url=None)
    app.state.runtime = runtime

    auth_token = runtime.config.auth_token

    @app.middleware("http")
    async def check_auth(request: Request, call_next):
        if auth_token and request.url.path != "/health":
            supplied = request.headers.get("authorization", "")
            if supplied != f"Bearer {auth_token}":
                return JSONResponse(status_code=401, content={"detail": "missing or bad token"})
        return await call_next(request)

    # ---- ingestion ----

    @app.post("/documents", status_code=201)
    def upload_document(file: UploadFile = File(...), collection: str = Form("filings")):
        name = file.filename or "upload.md"
        content_type = (file.content_type or "").split(";")[0].strip().lower()
        suffix_ok = name.lower().endswith(_TEXT_SUFFIXES)
        type_ok = content_type in ("", "application/octet-stream") or content_type.startswith("text/")
        if not (suffix_ok and type_ok):
            raise HTTPException(415, detail=f"unsupported upload {name!r} ({content_type or 'unknown type'})")
        raw = file.file.read()
        try:
            content = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise HTTPException(415, detail=f"{name!r} is not UTF-8 text")

        try:
            result = ingest_document(
                name,
                content,
                runtime.store,
                runtime.gateway,
                registries=runtime.registries,
                collection=collection,
            )
        except ValueError as err:
            raise HTTPException(422, detail=str(err))
        except IngestError as err:
            logger.exception("ingest failed for %s", name)
            return JSONResponse(status_code=500, content={"detail": str(err), "stage": err.stage})
        runtime.flush_store()
        return {
            "doc_id": result.doc_id,
            "metadata": _meta_payload(result.meta),
            "chunk_count": result.chunk_count,
            "flagged": result.flagged,
            "replaced": result.replaced,
        }

    # ---- conversations ----

    @app.post("/conversations", status_code=201)
    def create_conversation(body: ConversationCreate | None = None):
        conv = runtime.conversations.create((body or ConversationCreate()).title)
        return {
            "conversation_id": conv.conversation_id,
            "title": conv.title,
            "created_at": conv.created_at,
        }

    @app.post("/conversations/{conversation_id}/messages")
    def post_message(conversation_id: str, body: MessageIn):
        conversations = runtime.conversations
        try:
            conversations.get(conversation_id)
        except KeyError:
            raise HTTPException(404, detail=f"unknown conversation {conversation_id!r}")

        history = conversations.turns(conversation_id)
        user_turn = ConversationTurn(conversation_id, "user", body.text)
        conversations.append_turn(conversation_id, "user", body.text)

        try:
            action = route_message(user_turn, history, runtime.deps)
            if action == "direct_answer":
                prior = next(t.text for t in reversed(history) if t.role == "assistant")
                text, usage = respond_direct(body.text, prior, runtime.gateway)
                answer = Answer(text, (), (), usage)
                no_answer = False
                context_ref = None
            else:
                result = run_pipeline(body.text, runtime.deps)
                answer = result.answer or Answer(NO_ANSWER_TEXT, (), (), result.usage)
                no_answer = result.no_answer
                context_ref = json.dumps(result.context_chunk_ids) if result.context_chunk_ids else None
        except PipelineError as err:
            logger.exception("pipeline failed for conversation %s", conversation_id)
            return JSONResponse(status_code=500, content={"detail": str(err), "stage": err.stage})

        conversations.append_turn(conversation_id, "assistant", answer.text, context_ref)
        terminal = _answer_payload(conversation_id, answer, no_answer=no_answer)

        def frames() -> Iterator[str]:
            for piece in _pieces(answer.text):
                yield _sse("delta", {"text": piece})
            yield _sse("done", terminal)

        return StreamingResponse(frames(), media_type="text/event-stream")

    # ---- catalog and status ----

    @app.get("/companies")
    def companies():
        grouped: dict[str, dict] = {}
        for stored in runtime.store.list_documents():
            name = stored.meta.company_name
            if not name:
                continue
            entry = grouped.setdefault(
                name,
                {"name": name, "document_count": 0, "report_types": set(), "date_min": None, "date_max": None},
            )
            entry["document_count"] += 1
            if stored.meta.report_type:
                entry["report_types"].add(stored.meta.report_type)
            if stored.meta.date is not None:
                iso = stored.meta.date.isoformat()
                if entry["date_min"] is None or iso < entry["date_min"]:
                    entry["date_min"] = iso
                if entry["date_max"] is None or iso > entry["date_max"]:
                    entry["date_max"] = iso
        out = []
        for name in sorted(grouped):
            entry = grouped[name]
            entry["report_types"] = sorted(entry["report_types"])
            out.append(entry)
        return {"companies": out}

    @app.get("/documents")
    def documents():
        docs = []
        for stored in sorted(runtime.store.list_documents(), key=lambda s: (s.doc.source_name, s.doc.doc_id)):
            docs.append(
                {
                    "doc_id": stored.doc.doc_id,
                    "source_name": stored.doc.source_name,
                    "collection": stored.doc.collection,
                    "ingested_at": stored.doc.ingested_at,
                    "flagged": stored.flagged,
                    "chunk_count": len(runtime.store.list_chunks(stored.doc.doc_id)),
                    "metadata": _meta_payload(stored.meta),
                }
            )
        return {"documents": docs}

    @app.get("/filters")
    def filters():
        options = runtime.store.filter_options()
        return {
            "companies": list(options.companies),
            "report_types": list(options.report_types),
            "date_min": options.date_min.isoformat() if options.date_min else None,
            "date_max": options.date_max.isoformat() if options.date_max else None,
            "fetched_at": options.fetched_at,
            "ttl": options.ttl,
        }

    @app.get("/health")
    def health():
        try:
            runtime.gateway.embed(["health probe"])
            reachable = True
        except Exception:  # noqa: BLE001 - any provider fault means unreachable
            reachable = False
        provider = runtime.gateway.provider
        embedder = runtime.gateway.embedder
        return {
            "status": "ok" if reachable else "degraded",
            "version": runtime.version,
            "documents": runtime.store.document_count,
            "chunks": runtime.store.chunk_count,
            "provider": {
                "name": getattr(provider, "name", type(provider).__name__),
                "embedder": getattr(embedder, "name", type(embedder).__name__),
                "reachable": reachable,
            },
        }

    return app

"""Hybrid document store: exact dense kNN, BM25 full-text search, metadata
filtering, and reciprocal-rank-fusion retrieval.

Documents, chunks, metadata, and vectors live in memory behind a
reader-writer lock; an optional directory backs the store with a manifest,
newline-delimited JSON records, and flat little-endian float32 vector files.
The inverted index is rebuilt on load. Search is exact (brute force), which
keeps results reproducible against reference oracles at desk-scale corpora.
"""
from __future__ import annotations

import datetime as dt
import json
import math
import os
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .corpus import Chunk, Document
from .gateway import EmbeddingVector

__all__ = [
    "FilterOptions",
    "FilterValidationError",
    "HybridIndex",
    "MetadataFilter",
    "RankedHit",
    "ReportMetadata",
    "StoredDocument",
]

_FORMAT_VERSION = 1
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumerics; the single tokenization
    rule used for every full-text structure in the store."""
    return _TOKEN_RE.findall(text.lower())


class ReportMetadata(BaseModel):
    """Catalog metadata of one ingested report.

    ``date`` is the document's own calendar date; None when the document
    discloses none (such records are flagged at ingest). ``title`` follows
    "<report type> – <year> (<company>)" and is composed by code, not by a
    model.
    """

    model_config = ConfigDict(extra="ignore")

    title: str = ""
    company_name: str = ""
    keywords: list[str] = Field(default_factory=list, max_length=5)
    summary: str = ""
    date: dt.date | None = None
    report_type: str = ""


@dataclass(frozen=True)
class MetadataFilter:
    """Conjunction of optional clauses; a None clause is unconstrained."""

    company_names: frozenset[str] | None = None
    date_range: tuple[dt.date, dt.date] | None = None
    report_types: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.company_names is not None:
            object.__setattr__(self, "company_names", frozenset(self.company_names))
        if self.report_types is not None:
            object.__setattr__(self, "report_types", frozenset(self.report_types))
        if self.date_range is not None:
            start, end = self.date_range
            if start > end:
                raise ValueError(f"date_range start {start} is after end {end}")
            object.__setattr__(self, "date_range", (start, end))

    @property
    def is_empty(self) -> bool:
        return self.company_names is None and self.date_range is None and self.report_types is None


class FilterValidationError(ValueError):
    def __init__(self, field: str, values: Iterable[str]):
        vals = sorted(values)
        super().__init__(f"unknown {field} value(s): {vals}")
        self.field = field
        self.values = vals


@dataclass(frozen=True)
class FilterOptions:
    """Live catalog of filterable values, cached with a TTL."""

    companies: tuple[str, ...]
    report_types: tuple[str, ...]
    date_min: dt.date | None
    date_max: dt.date | None
    fetched_at: float
    ttl: float = 3600.0

    def is_stale(self, now: float) -> bool:
        return (now - self.fetched_at) > self.ttl


@dataclass(frozen=True)
class RankedHit:
    """One fused retrieval result; at least one leg rank is present and
    fused_score equals the sum of 1/(k_rrf + rank) over present ranks."""

    chunk_id: str
    doc_id: str
    dense_rank: int | None
    sparse_rank: int | None
    fused_score: float


class StoredDocument(NamedTuple):
    doc: Document
    meta: ReportMetadata
    flagged: bool


class _RWLock:
    """Many readers or one writer. Read sections may nest."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class _DocRecord:
    __slots__ = ("doc", "meta", "flagged", "chunks", "doc_vec", "chunk_vecs")

    def __init__(self, doc, meta, flagged, chunks, doc_vec, chunk_vecs):
        self.doc = doc
        self.meta = meta
        self.flagged = flagged
        self.chunks = chunks
        self.doc_vec = doc_vec
        self.chunk_vecs = chunk_vecs


def _bm25_idf(n: int, df: int) -> float:
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def _bm25_over(
    corpus: dict[str, list[str]], terms: Sequence[str], k1: float, b: float
) -> dict[str, float]:
    """Reference-shaped BM25 over a tiny in-memory corpus (used for company
    name matching); duplicate query terms count once per occurrence."""
    n = len(corpus)
    if n == 0:
        return {}
    avgdl = sum(len(t) for t in corpus.values()) / n
    df: dict[str, int] = {}
    for toks in corpus.values():
        for t in set(toks):
            df[t] = df.get(t, 0) + 1
    scores: dict[str, float] = {}
    for key, toks in corpus.items():
        s = 0.0
        for term in terms:
            tf = toks.count(term)
            if tf == 0:
                continue
            s += _bm25_idf(n, df[term]) * tf * (k1 + 1) / (
                tf + k1 * (1 - b + b * len(toks) / avgdl)
            )
        if s > 0.0:
            scores[key] = s
    return scores


def _write_atomic(directory: str, name: str, data: bytes) -> None:
    tmp = os.path.join(directory, f".tmp-{name}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, os.path.join(directory, name))


class HybridIndex:
    """The hybrid store. ``path=None`` keeps it purely in memory; with a
    path, every mutation rewrites the backing directory."""

    def __init__(
        self,
        path: str | None = None,
        *,
        dim: int = 768,
        bm25_k1: float = 1.2,
        bm25_b: float = 0.75,
        rrf_k: int = 60,
        options_ttl: float = 3600.0,
        clock: Callable[[], float] = time.time,
    ):
        self.dim = dim
        self.bm25_k1 = bm25_k1
        self.bm25_b = bm25_b
        self.rrf_k = rrf_k
        self._options_ttl = options_ttl
        self._clock = clock
        self._path = path

        self._lock = _RWLock()
        self._docs: dict[str, _DocRecord] = {}
        self._chunks: dict[str, Chunk] = {}
        self._chunk_doc: dict[str, str] = {}
        self._chunk_vecs: dict[str, EmbeddingVector] = {}
        self._chunk_tokens: dict[str, list[str]] = {}
        self._postings: dict[str, dict[str, int]] = {}
        self._total_len = 0
        self._meta_tokens: dict[str, list[str]] = {}
        self._meta_postings: dict[str, dict[str, int]] = {}
        self._meta_total_len = 0

        self._matrix_lock = threading.Lock()
        self._matrix: np.ndarray | None = None
        self._matrix_ids: list[str] = []
        self._matrix_dirty = True

        self._options_lock = threading.Lock()
        self._options: FilterOptions | None = None
        self._options_recomputed = 0

        if path is not None and os.path.exists(os.path.join(path, "manifest.json")):
            self._load(path)

    @classmethod
    def open(cls, path: str, **kwargs) -> "HybridIndex":
        if not os.path.exists(os.path.join(path, "manifest.json")):
            raise FileNotFoundError(f"no store manifest under {path!r}")
        return cls(path=path, **kwargs)

    # ---- introspection ----

    @property
    def document_count(self) -> int:
        with self._lock.read():
            return len(self._docs)

    @property
    def chunk_count(self) -> int:
        with self._lock.read():
            return len(self._chunks)

    @property
    def options_recomputed(self) -> int:
        return self._options_recomputed

    def get_document(self, doc_id: str) -> StoredDocument:
        with self._lock.read():
            rec = self._docs.get(doc_id)
            if rec is None:
                raise KeyError(f"unknown doc_id {doc_id!r}")
            return StoredDocument(rec.doc, rec.meta, rec.flagged)

    def list_documents(self) -> list[StoredDocument]:
        with self._lock.read():
            return [StoredDocument(r.doc, r.meta, r.flagged) for r in self._docs.values()]

    def list_chunks(self, doc_id: str) -> list[Chunk]:
        with self._lock.read():
            rec = self._docs.get(doc_id)
            if rec is None:
                raise KeyError(f"unknown doc_id {doc_id!r}")
            return list(rec.chunks)

    def get_chunk(self, chunk_id: str) -> Chunk:
        with self._lock.read():
            chunk = self._chunks.get(chunk_id)
            if chunk is None:
                raise KeyError(f"unknown chunk_id {chunk_id!r}")
            return chunk

    def chunk_vector(self, chunk_id: str) -> EmbeddingVector:
        with self._lock.read():
            vec = self._chunk_vecs.get(chunk_id)
            if vec is None:
                raise KeyError(f"unknown chunk_id {chunk_id!r}")
            return vec

    def doc_vector(self, doc_id: str) -> EmbeddingVector:
        with self._lock.read():
            rec = self._docs.get(doc_id)
            if rec is None:
                raise KeyError(f"unknown doc_id {doc_id!r}")
            return rec.doc_vec

    # ---- mutation ----

    def _check_dim(self, vec: EmbeddingVector) -> None:
        if vec.dim != self.dim:
            raise ValueError(f"vector dimension {vec.dim} != store dimension {self.dim}")

    def upsert_document(
        self,
        doc: Document,
        meta: ReportMetadata,
        chunks: Sequence[Chunk],
        doc_vec: EmbeddingVector,
        chunk_vecs: Sequence[EmbeddingVector],
        *,
        flagged: bool = False,
    ) -> None:
        # validate everything before touching state
        if len(chunks) != len(chunk_vecs):
            raise ValueError(f"{len(chunks)} chunks but {len(chunk_vecs)} chunk vectors")
        self._check_dim(doc_vec)
        for v in chunk_vecs:
            self._check_dim(v)
        for c in chunks:
            if c.doc_id != doc.doc_id:
                raise ValueError(f"chunk {c.chunk_id!r} belongs to {c.doc_id!r}, not {doc.doc_id!r}")
        seen = set()
        for c in chunks:
            if c.chunk_id in seen:
                raise ValueError(f"duplicate chunk_id {c.chunk_id!r}")
            seen.add(c.chunk_id)

        with self._lock.write():
            if doc.doc_id in self._docs:
                self._remove_doc_locked(doc.doc_id)
            rec = _DocRecord(doc, meta, flagged, list(chunks), doc_vec, list(chunk_vecs))
            self._docs[doc.doc_id] = rec
            for c, v in zip(rec.chunks, rec.chunk_vecs):
                toks = tokenize(c.text)
                self._chunks[c.chunk_id] = c
                self._chunk_doc[c.chunk_id] = doc.doc_id
                self._chunk_vecs[c.chunk_id] = v
                self._chunk_tokens[c.chunk_id] = toks
                self._total_len += len(toks)
                for t in toks:
                    self._postings.setdefault(t, {})
                    self._postings[t][c.chunk_id] = self._postings[t].get(c.chunk_id, 0) + 1
            mtoks = tokenize(
                " ".join([meta.title, meta.summary, " ".join(meta.keywords), meta.company_name])
            )
            self._meta_tokens[doc.doc_id] = mtoks
            self._meta_total_len += len(mtoks)
            for t in mtoks:
                self._meta_postings.setdefault(t, {})
                self._meta_postings[t][doc.doc_id] = self._meta_postings[t].get(doc.doc_id, 0) + 1
            self._matrix_dirty = True
            with self._options_lock:
                self._options = None
            if self._path is not None:
                self._save_locked(self._path)

    def delete_document(self, doc_id: str) -> None:
        with self._lock.write():
            if doc_id not in self._docs:
                raise KeyError(f"unknown doc_id {doc_id!r}")
            self._remove_doc_locked(doc_id)
            self._matrix_dirty = True
            with self._options_lock:
                self._options = None
            if self._path is not None:
                self._save_locked(self._path)

    def _remove_doc_locked(self, doc_id: str) -> None:
        rec = self._docs.pop(doc_id)
        for c in rec.chunks:
            toks = self._chunk_tokens.pop(c.chunk_id)
            self._total_len -= len(toks)
            for t in set(toks):
                plist = self._postings.get(t)
                if plist is not None:
                    plist.pop(c.chunk_id, None)
                    if not plist:
                        del self._postings[t]
            del self._chunks[c.chunk_id]
            del self._chunk_doc[c.chunk_id]
            del self._chunk_vecs[c.chunk_id]
        mtoks = self._meta_tokens.pop(doc_id, [])
        self._meta_total_len -= len(mtoks)
        for t in set(mtoks):
            plist = self._meta_postings.get(t)
            if plist is not None:
                plist.pop(doc_id, None)
                if not plist:
                    del self._meta_postings[t]

    # ---- filtering ----

    def filter_options(self) -> FilterOptions:
        with self._lock.read():
            return self._filter_options_locked()

    def _filter_options_locked(self) -> FilterOptions:
        now = self._clock()
        with self._options_lock:
            cached = self._options
        if cached is not None and not cached.is_stale(now):
            return cached
        companies = sorted({r.meta.company_name for r in self._docs.values() if r.meta.company_name})
        rtypes = sorted({r.meta.report_type for r in self._docs.values() if r.meta.report_type})
        dates = [r.meta.date for r in self._docs.values() if r.meta.date is not None]
        opts = FilterOptions(
            companies=tuple(companies),
            report_types=tuple(rtypes),
            date_min=min(dates) if dates else None,
            date_max=max(dates) if dates else None,
            fetched_at=now,
            ttl=self._options_ttl,
        )
        with self._options_lock:
            self._options = opts
            self._options_recomputed += 1
        return opts

    def _validate_filter_locked(self, mfilter: MetadataFilter) -> None:
        opts = self._filter_options_locked()
        if mfilter.company_names is not None:
            unknown = mfilter.company_names - set(opts.companies)
            if unknown:
                raise FilterValidationError("company_names", unknown)
        if mfilter.report_types is not None:
            unknown = mfilter.report_types - set(opts.report_types)
            if unknown:
                raise FilterValidationError("report_types", unknown)

    def filter_documents(self, mfilter: MetadataFilter) -> set[str]:
        with self._lock.read():
            self._validate_filter_locked(mfilter)
            return self._filter_documents_locked(mfilter)

    def _filter_documents_locked(self, mfilter: MetadataFilter) -> set[str]:
        out = set()
        for doc_id, rec in self._docs.items():
            m = rec.meta
            if mfilter.company_names is not None and m.company_name not in mfilter.company_names:
                continue
            if mfilter.report_types is not None and m.report_type not in mfilter.report_types:
                continue
            if mfilter.date_range is not None:
                if m.date is None or not (mfilter.date_range[0] <= m.date <= mfilter.date_range[1]):
                    continue
            out.add(doc_id)
        return out

    # ---- search ----

    def _ensure_matrix_locked(self) -> tuple[np.ndarray, list[str]]:
        with self._matrix_lock:
            if self._matrix_dirty or self._matrix is None:
                ids = list(self._chunks.keys())
                if ids:
                    m = np.stack([self._chunk_vecs[c].values.astype(np.float64) for c in ids])
                    norms = np.linalg.norm(m, axis=1)
                    norms[norms == 0.0] = 1.0
                    m = m / norms[:, None]
                else:
                    m = np.zeros((0, self.dim), dtype=np.float64)
                self._matrix = m
                self._matrix_ids = ids
                self._matrix_dirty = False
            return self._matrix, self._matrix_ids

    def dense_search(
        self, query_vec: EmbeddingVector, candidate_docs: set[str] | None, k: int
    ) -> list[tuple[str, float]]:
        """Top-k chunks by cosine similarity, ties by chunk_id ascending.
        Exact: every candidate chunk is scored."""
        if k < 1:
            raise ValueError("k must be >= 1")
        self._check_dim(query_vec)
        with self._lock.read():
            return self._dense_locked(query_vec, candidate_docs, k)

    def _dense_locked(
        self, query_vec: EmbeddingVector, candidate_docs: set[str] | None, k: int | None
    ) -> list[tuple[str, float]]:
        matrix, ids = self._ensure_matrix_locked()
        if not ids:
            return []
        q = query_vec.values.astype(np.float64)
        if query_vec.norm > 0.0:
            q = q / query_vec.norm
        sims = matrix @ q
        pairs = [
            (cid, float(sims[i]))
            for i, cid in enumerate(ids)
            if candidate_docs is None or self._chunk_doc[cid] in candidate_docs
        ]
        pairs.sort(key=lambda p: (-p[1], p[0]))
        return pairs if k is None else pairs[:k]

    def sparse_search(
        self, terms: Sequence[str], candidate_docs: set[str] | None, k: int
    ) -> list[tuple[str, float]]:
        """Top-k chunks by Okapi BM25 over chunk text. Corpus statistics are
        global; candidate_docs only restricts which chunks are scored.
        Duplicate query terms contribute once per occurrence."""
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock.read():
            return self._sparse_locked(terms, candidate_docs, k)

    def _sparse_locked(
        self, terms: Sequence[str], candidate_docs: set[str] | None, k: int | None
    ) -> list[tuple[str, float]]:
        tokens = [t for term in terms for t in tokenize(str(term))]
        n = len(self._chunks)
        if not tokens or n == 0:
            return []
        avgdl = self._total_len / n
        k1, b = self.bm25_k1, self.bm25_b
        scores: dict[str, float] = {}
        for term in tokens:
            plist = self._postings.get(term)
            if not plist:
                continue
            idf = _bm25_idf(n, len(plist))
            for cid, tf in plist.items():
                if candidate_docs is not None and self._chunk_doc[cid] not in candidate_docs:
                    continue
                dl = len(self._chunk_tokens[cid])
                scores[cid] = scores.get(cid, 0.0) + idf * tf * (k1 + 1) / (
                    tf + k1 * (1 - b + b * dl / avgdl)
                )
        pairs = sorted(scores.items(), key=lambda p: (-p[1], p[0]))
        return pairs if k is None else pairs[:k]

    def sparse_search_documents(self, terms: Sequence[str], k: int = 10) -> list[tuple[str, float]]:
        """BM25 over document metadata text (title, summary, keywords,
        company name); returns (doc_id, score)."""
        tokens = [t for term in terms for t in tokenize(str(term))]
        with self._lock.read():
            n = len(self._docs)
            if not tokens or n == 0:
                return []
            avgdl = self._meta_total_len / n if self._meta_total_len else 1.0
            k1, b = self.bm25_k1, self.bm25_b
            scores: dict[str, float] = {}
            for term in tokens:
                plist = self._meta_postings.get(term)
                if not plist:
                    continue
                idf = _bm25_idf(n, len(plist))
                for doc_id, tf in plist.items():
                    dl = len(self._meta_tokens[doc_id]) or 1
                    scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (k1 + 1) / (
                        tf + k1 * (1 - b + b * dl / avgdl)
                    )
            pairs = sorted(scores.items(), key=lambda p: (-p[1], p[0]))
            return pairs[:k]

    def hybrid_search(
        self,
        query_vec: EmbeddingVector,
        terms: Sequence[str],
        mfilter: MetadataFilter | None = None,
        k: int = 10,
        *,
        doc_prefilter: int | None = None,
    ) -> list[RankedHit]:
        """Filters first, then dense and sparse legs over the surviving
        chunks, fused by reciprocal rank: score = Σ 1/(rrf_k + rank).

        The dense leg ranks every candidate chunk; the sparse leg ranks the
        chunks with positive BM25 score. ``doc_prefilter`` optionally narrows
        an unfiltered search to the N documents whose document vectors are
        most similar to the query (off by default).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        self._check_dim(query_vec)
        mfilter = mfilter or MetadataFilter()
        with self._lock.read():
            self._validate_filter_locked(mfilter)
            candidates: set[str] | None
            if mfilter.is_empty:
                candidates = None
                if doc_prefilter is not None and self._docs:
                    ranked = self._rank_docs_dense_locked(query_vec)
                    candidates = {doc_id for doc_id, _ in ranked[:doc_prefilter]}
            else:
                candidates = self._filter_documents_locked(mfilter)
            dense = self._dense_locked(query_vec, candidates, None)
            sparse = self._sparse_locked(terms, candidates, None)
            dense_rank = {cid: i for i, (cid, _) in enumerate(dense, start=1)}
            sparse_rank = {cid: i for i, (cid, _) in enumerate(sparse, start=1)}
            hits = []
            for cid in set(dense_rank) | set(sparse_rank):
                dr = dense_rank.get(cid)
                sr = sparse_rank.get(cid)
                fused = 0.0
                if dr is not None:
                    fused += 1.0 / (self.rrf_k + dr)
                if sr is not None:
                    fused += 1.0 / (self.rrf_k + sr)
                hits.append(RankedHit(cid, self._chunk_doc[cid], dr, sr, fused))
            hits.sort(key=lambda h: (-h.fused_score, h.chunk_id))
            return hits[:k]

    def _rank_docs_dense_locked(self, query_vec: EmbeddingVector) -> list[tuple[str, float]]:
        q = query_vec.values.astype(np.float64)
        if query_vec.norm > 0.0:
            q = q / query_vec.norm
        pairs = []
        for doc_id, rec in self._docs.items():
            v = rec.doc_vec.values.astype(np.float64)
            sim = float(v @ q / rec.doc_vec.norm) if rec.doc_vec.norm > 0 else 0.0
            pairs.append((doc_id, sim))
        pairs.sort(key=lambda p: (-p[1], p[0]))
        return pairs

    # ---- company name matching ----

    def match_company(self, name: str) -> tuple[str, float] | None:
        """Best stored company for a free-form name, with a confidence equal
        to the BM25 score normalized by the candidate's self-match score."""
        with self._lock.read():
            names = sorted({r.meta.company_name for r in self._docs.values() if r.meta.company_name})
            if not names:
                return None
            corpus = {n: tokenize(n) for n in names}
            query_scores = _bm25_over(corpus, tokenize(name), self.bm25_k1, self.bm25_b)
            best: tuple[str, float] | None = None
            for candidate in names:
                self_score = _bm25_over(corpus, corpus[candidate], self.bm25_k1, self.bm25_b).get(
                    candidate, 0.0
                )
                score = query_scores.get(candidate, 0.0)
                conf = min(score / self_score, 1.0) if self_score > 0.0 else 0.0
                if best is None or conf > best[1]:
                    best = (candidate, conf)
            return best

    # ---- persistence ----

    def save(self, path: str) -> None:
        with self._lock.read():
            self._save_locked(path)

    def flush(self) -> None:
        if self._path is None:
            raise ValueError("store has no backing path; use save(path)")
        self.save(self._path)

    def _save_locked(self, path: str) -> None:
        os.makedirs(path, exist_ok=True)
        doc_lines = []
        chunk_lines = []
        doc_rows = []
        chunk_rows = []
        for rec in self._docs.values():
            doc_lines.append(
                json.dumps(
                    {
                        "doc": asdict(rec.doc),
                        "meta": rec.meta.model_dump(mode="json"),
                        "flagged": rec.flagged,
                    },
                    sort_keys=True,
                )
            )
            doc_rows.append(rec.doc_vec.values)
            for c, v in zip(rec.chunks, rec.chunk_vecs):
                chunk_lines.append(json.dumps(asdict(c), sort_keys=True))
                chunk_rows.append(v.values)
        manifest = {
            "format_version": _FORMAT_VERSION,
            "dim": self.dim,
            "bm25_k1": self.bm25_k1,
            "bm25_b": self.bm25_b,
            "rrf_k": self.rrf_k,
            "options_ttl": self._options_ttl,
            "documents": len(doc_lines),
            "chunks": len(chunk_lines),
        }
        _write_atomic(path, "documents.jsonl", ("\n".join(doc_lines) + ("\n" if doc_lines else "")).encode("utf-8"))
        _write_atomic(path, "chunks.jsonl", ("\n".join(chunk_lines) + ("\n" if chunk_lines else "")).encode("utf-8"))
        _write_atomic(path, "doc_vectors.bin", np.stack(doc_rows).astype("<f4").tobytes() if doc_rows else b"")
        _write_atomic(path, "chunk_vectors.bin", np.stack(chunk_rows).astype("<f4").tobytes() if chunk_rows else b"")
        _write_atomic(path, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))

    def _load(self, path: str) -> None:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported store format {manifest.get('format_version')!r}")
        if "dim" in manifest and manifest["dim"] != self.dim:
            # the manifest is authoritative for an existing store
            self.dim = int(manifest["dim"])
        self.bm25_k1 = float(manifest.get("bm25_k1", self.bm25_k1))
        self.bm25_b = float(manifest.get("bm25_b", self.bm25_b))
        self.rrf_k = int(manifest.get("rrf_k", self.rrf_k))
        self._options_ttl = float(manifest.get("options_ttl", self._options_ttl))

        def read_lines(name: str) -> list[dict]:
            fpath = os.path.join(path, name)
            if not os.path.exists(fpath):
                return []
            with open(fpath, encoding="utf-8") as fh:
                return [json.loads(line) for line in fh if line.strip()]

        doc_entries = read_lines("documents.jsonl")
        chunk_entries = read_lines("chunks.jsonl")

        def read_vectors(name: str, count: int) -> list[EmbeddingVector]:
            fpath = os.path.join(path, name)
            raw = open(fpath, "rb").read() if os.path.exists(fpath) else b""
            arr = np.frombuffer(raw, dtype="<f4")
            if count and arr.size != count * self.dim:
                raise ValueError(f"{name}: expected {count * self.dim} floats, found {arr.size}")
            arr = arr.reshape(count, self.dim) if count else arr.reshape(0, self.dim)
            return [EmbeddingVector(row) for row in arr]

        doc_vecs = read_vectors("doc_vectors.bin", len(doc_entries))
        chunk_vecs = read_vectors("chunk_vectors.bin", len(chunk_entries))

        chunks_by_doc: dict[str, list[tuple[Chunk, EmbeddingVector]]] = {}
        for entry, vec in zip(chunk_entries, chunk_vecs):
            chunk = Chunk(**entry)
            chunks_by_doc.setdefault(chunk.doc_id, []).append((chunk, vec))

        # suspend auto-save while rebuilding
        backing, self._path = self._path, None
        try:
            for entry, dvec in zip(doc_entries, doc_vecs):
                doc = Document(**entry["doc"])
                meta = ReportMetadata.model_validate(entry["meta"])
                pairs = chunks_by_doc.get(doc.doc_id, [])
                self.upsert_document(
                    doc,
                    meta,
                    [c for c, _ in pairs],
                    dvec,
                    [v for _, v in pairs],
                    flagged=bool(entry.get("flagged", False)),
                )
        finally:
            self._path = backing

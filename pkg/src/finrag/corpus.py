"""Document model and structure-aware Markdown chunking.

Turns normalized Markdown into retrievable chunks: a recursive splitter that
prefers heading boundaries, then blank-line paragraph boundaries, then
whitespace, then a hard character cut; a table-aware merge pass that glues
adjacent chunks split mid-table; and a trailing-context overlap so adjacent
chunks share text.

All functions are pure and safe to call from multiple threads.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace

__all__ = [
    "Chunk",
    "ChunkParams",
    "Document",
    "chunk_document",
    "is_table_row",
    "make_doc_id",
    "merge_table_chunks",
    "normalize_markdown",
]


@dataclass(frozen=True)
class ChunkParams:
    """Chunking size knobs, all in characters."""

    l_max: int = 1800
    overlap: int = 300
    merged_max: int = 3600

    def __post_init__(self) -> None:
        if not (0 < self.overlap < self.l_max <= self.merged_max):
            raise ValueError(
                "invalid chunk params: require 0 < overlap < l_max <= merged_max, "
                f"got overlap={self.overlap} l_max={self.l_max} merged_max={self.merged_max}"
            )


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_name: str
    content: str
    collection: str = "filings"
    ingested_at: str = ""


@dataclass(frozen=True)
class Chunk:
    """A retrievable fragment of one document.

    ``head_overlap`` counts how many leading characters duplicate the tail of
    the preceding chunk; stripping that prefix from every chunk and
    concatenating in ordinal order reconstructs the normalized source.
    """

    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    char_len: int = field(default=-1)
    head_overlap: int = 0

    def __post_init__(self) -> None:
        if self.char_len == -1:
            object.__setattr__(self, "char_len", len(self.text))


def make_doc_id(source_name: str, content: str) -> str:
    """Deterministic document id from name + normalized content."""
    digest = hashlib.sha256()
    digest.update(source_name.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(normalize_markdown(content).encode("utf-8"))
    return digest.hexdigest()[:16]


def normalize_markdown(text: str) -> str:
    """CRLF to LF, strip trailing whitespace per line, collapse runs of three
    or more blank lines down to two."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = "\n".join(line.rstrip() for line in text.split("\n"))
    return re.sub(r"\n{4,}", "\n\n\n", text)


def is_table_row(line: str) -> bool:
    """True iff the line, trimmed of leading whitespace, begins with a pipe."""
    return line.lstrip().startswith("|")


# ---- recursive splitter ----

def _positions_heading(text: str) -> list[int]:
    return [m.start() for m in re.finditer(r"(?m)^#{1,6} ", text) if m.start() > 0]


def _positions_blank_line(text: str) -> list[int]:
    return [m.end() for m in re.finditer(r"\n\n+", text) if m.end() < len(text)]


def _positions_newline(text: str) -> list[int]:
    return [m.end() for m in re.finditer(r"\n", text) if m.end() < len(text)]


def _positions_whitespace(text: str) -> list[int]:
    return [m.end() for m in re.finditer(r"\s+", text) if m.end() < len(text)]


# Priority order: headings, paragraph breaks, then whitespace (newlines first
# so table rows stay whole), then the hard cut fallback.
_LEVELS = (
    _positions_heading,
    _positions_blank_line,
    _positions_newline,
    _positions_whitespace,
)


def _split(text: str, limit: int, level: int = 0) -> list[str]:
    if len(text) <= limit:
        return [text]
    if level >= len(_LEVELS):
        return [text[i: i + limit] for i in range(0, len(text), limit)]
    positions = _LEVELS[level](text)
    if not positions:
        return _split(text, limit, level + 1)
    bounds = [0, *positions, len(text)]
    frags = [text[a:b] for a, b in zip(bounds, bounds[1:]) if a < b]

    out: list[str] = []
    buf = ""
    for frag in frags:
        if len(frag) > limit:
            if buf:
                out.append(buf)
                buf = ""
            out.extend(_split(frag, limit, level + 1))
        elif buf and len(buf) + len(frag) > limit:
            out.append(buf)
            buf = frag
        else:
            buf += frag
    if buf:
        out.append(buf)
    return out


def _chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}:{ordinal:04d}"


def chunk_document(doc: Document, params: ChunkParams) -> list[Chunk]:
    """Split a document into chunks of at most ``params.l_max`` characters.

    Each chunk after the first is prefixed with the last ``params.overlap``
    characters of the text preceding it, so adjacent chunks share context.
    Empty (or whitespace-only) content yields an empty list.
    """
    text = normalize_markdown(doc.content)
    if not text.strip():
        return []
    # Cores never exceed l_max - overlap so the copied prefix keeps every
    # chunk within l_max.
    cores = _split(text, params.l_max - params.overlap)
    chunks: list[Chunk] = []
    pos = 0
    for i, core in enumerate(cores):
        head = 0 if i == 0 else min(params.overlap, pos)
        chunks.append(
            Chunk(
                chunk_id=_chunk_id(doc.doc_id, i),
                doc_id=doc.doc_id,
                ordinal=i,
                text=text[pos - head: pos] + core,
                head_overlap=head,
            )
        )
        pos += len(core)
    return chunks


def _last_nonblank_line(text: str) -> str:
    for line in reversed(text.split("\n")):
        if line.strip():
            return line
    return ""


def _first_nonblank_line(text: str) -> str:
    for line in text.split("\n"):
        if line.strip():
            return line
    return ""


def merge_table_chunks(chunks: list[Chunk], params: ChunkParams) -> list[Chunk]:
    """Merge adjacent chunks split mid-table.

    A pair merges when the first chunk's last non-blank line and the second
    chunk's first own (non-overlap) non-blank line are both table rows and the
    merged text stays within ``params.merged_max``. Greedy single pass, left
    to right, re-examining each merged chunk against the next. Ordinals and
    chunk ids are reassigned contiguously.
    """
    if not chunks:
        return []
    merged: list[Chunk] = [chunks[0]]
    for nxt in chunks[1:]:
        cur = merged[-1]
        core = nxt.text[nxt.head_overlap:]
        if (
            is_table_row(_last_nonblank_line(cur.text))
            and is_table_row(_first_nonblank_line(core))
            and len(cur.text) + len(core) <= params.merged_max
        ):
            merged[-1] = replace(cur, text=cur.text + core, char_len=len(cur.text) + len(core))
        else:
            merged.append(nxt)
    return [
        replace(c, ordinal=i, chunk_id=_chunk_id(c.doc_id, i))
        for i, c in enumerate(merged)
    ]

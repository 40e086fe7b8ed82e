"""Durable conversation log in a small sqlite file, kept apart from the
document index. Turns are append-only; nothing here is ever updated or
deleted, so a restart replays exactly what was written."""
from __future__ import annotations

import datetime as dt
import sqlite3
import threading
import uuid
from dataclasses import dataclass
from typing import Callable

from .agents import ConversationTurn

__all__ = ["Conversation", "ConversationStore"]

_SCHEMA = """
CREATE TABLE IF NOT EXISTS conversations (
    conversation_id TEXT PRIMARY KEY,
    title TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS turns (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    conversation_id TEXT NOT NULL REFERENCES conversations(conversation_id),
    role TEXT NOT NULL CHECK (role IN ('user', 'assistant')),
    text TEXT NOT NULL,
    context_ref TEXT,
    created_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS turns_by_conversation ON turns (conversation_id, seq);
"""


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    title: str
    created_at: str


def _utc_now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


class ConversationStore:
    def __init__(self, path: str = ":memory:", *, clock: Callable[[], dt.datetime] = _utc_now):
        # one shared connection, serialized by our own lock
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._lock = threading.Lock()
        self._clock = clock
        with self._lock:
            self._conn.executescript(_SCHEMA)
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def _stamp(self) -> str:
        return self._clock().isoformat(timespec="seconds")

    def create(self, title: str = "") -> Conversation:
        conversation_id = uuid.uuid4().hex
        created_at = self._stamp()
        with self._lock:
            self._conn.execute(
                "INSERT INTO conversations (conversation_id, title, created_at) VALUES (?, ?, ?)",
                (conversation_id, title, created_at),
            )
            self._conn.commit()
        return Conversation(conversation_id, title, created_at)

    def get(self, conversation_id: str) -> Conversation:
        with self._lock:
            row = self._conn.execute(
                "SELECT conversation_id, title, created_at FROM conversations"
                " WHERE conversation_id = ?",
                (conversation_id,),
            ).fetchone()
        if row is None:
            raise KeyError(f"unknown conversation {conversation_id!r}")
        return Conversation(*row)

    def append_turn(
        self,
        conversation_id: str,
        role: str,
        text: str,
        context_ref: str | None = None,
    ) -> ConversationTurn:
        if role not in ("user", "assistant"):
            raise ValueError(f"unknown role {role!r}")
        self.get(conversation_id)
        with self._lock:
            self._conn.execute(
                "INSERT INTO turns (conversation_id, role, text, context_ref, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (conversation_id, role, text, context_ref, self._stamp()),
            )
            self._conn.commit()
        return ConversationTurn(conversation_id, role, text, context_ref)

    def turns(self, conversation_id: str) -> list[ConversationTurn]:
        self.get(conversation_id)
        with self._lock:
            rows = self._conn.execute(
                "SELECT conversation_id, role, text, context_ref FROM turns"
                " WHERE conversation_id = ? ORDER BY seq",
                (conversation_id,),
            ).fetchall()
        return [ConversationTurn(*row) for row in rows]

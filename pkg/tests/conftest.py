"""Shared fixtures and generators for the test suite."""
from __future__ import annotations

import random
import string

WORDS = [
    "revenue", "profit", "margin", "segment", "liquidity", "assets",
    "guidance", "outlook", "operating", "expenses", "cash", "flow",
    "dividend", "growth", "quarter", "fiscal", "equity", "ratio",
]


def random_words(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def random_table(rng: random.Random, rows: int) -> str:
    lines = ["| Year | Metric | Value |", "| --- | --- | --- |"]
    for _ in range(rows):
        lines.append(
            "| %d | %s | %d.%d |"
            % (rng.randint(2015, 2026), rng.choice(WORDS), rng.randint(1, 900), rng.randint(0, 9))
        )
    return "\n".join(lines)


def random_markdown_doc(rng: random.Random) -> str:
    """Compose a synthetic Markdown document mixing headings, prose, tables,
    blank runs, CRLF line endings, and trailing whitespace."""
    parts: list[str] = []
    for _ in range(rng.randint(1, 14)):
        kind = rng.random()
        if kind < 0.2:
            parts.append("#" * rng.randint(1, 4) + " " + random_words(rng, rng.randint(2, 6)))
        elif kind < 0.55:
            parts.append(random_words(rng, rng.randint(5, 400)))
        elif kind < 0.8:
            parts.append(random_table(rng, rng.randint(2, 60)))
        elif kind < 0.9:
            # a long unbroken token to force hard-cut recursion
            parts.append("".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(100, 2400))))
        else:
            parts.append(random_words(rng, rng.randint(3, 30)) + "   ")
    sep = lambda: rng.choice(["\n\n", "\n", "\r\n\r\n", "\n\n\n\n", "\n\n\n"])
    text = ""
    for p in parts:
        text += p + sep()
    return text

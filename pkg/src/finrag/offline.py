"""Offline chat provider: deterministic rule-based responders per agent.

Each responder reads the structured ``payload`` of the call and returns a
JSON object valid under the agent's response schema. Behavior is a pure
function of the payload, so full pipeline runs are reproducible without
network access. Scripted providers for fault injection live here too.
"""
from __future__ import annotations

import json
import re
import threading
from typing import Callable, Sequence

from .gateway import AgentCall, Completion

__all__ = ["OfflineRuleProvider", "ScriptedProvider", "content_tokens"]

_WORD_RE = re.compile(r"[a-z0-9]+")
_YEAR_RE = re.compile(r"\b(19|20)\d{2}\b")

_STOPWORDS = frozenset(
    """a an and are as at be but by did do does for from had has have how in into
    is it its of on or s that the their this to was were what when which with
    please you your me my""".split()
)

# Generic legal-form words ignored when matching a company name inside text.
_CORP_SUFFIXES = frozenset(
    "inc corp corporation ltd llc plc co company group holdings ag sa nv ab a s".split()
)

_REFORMAT_MARKERS = (
    "restate",
    "rephrase",
    "reword",
    "bullet",
    "shorter",
    "longer",
    "summarize",
    "summarise",
    "simpler",
    "as a table",
    "in a table",
    "repeat",
    "again",
    "one sentence",
    "plain language",
)

_REPORT_TYPES = (
    "Annual Report",
    "Quarterly Report",
    "Interim Report",
    "10-K",
    "10-Q",
    "Press Release",
)

_DECLINE_MARKERS = (
    "cannot answer",
    "can not answer",
    "cannot find",
    "could not find",
    "couldn't find",
    "unable to",
    "no relevant",
    "no answer",
    "not found in the",
    "do not contain",
    "does not contain",
    "insufficient information",
)


def _tokens(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    """Lowercase word tokens minus stopwords, order preserved, deduplicated."""
    seen: list[str] = []
    for tok in _tokens(text):
        if tok not in _STOPWORDS and tok not in seen:
            seen.append(tok)
    return seen


def _significant_name_tokens(name: str) -> list[str]:
    toks = [t for t in _tokens(name) if t not in _CORP_SUFFIXES]
    return toks or _tokens(name)


def _name_in_text(name: str, text_tokens: set[str]) -> bool:
    sig = _significant_name_tokens(name)
    return bool(sig) and all(t in text_tokens for t in sig)


def _years_of(text: str) -> list[str]:
    return [m.group(0) for m in _YEAR_RE.finditer(text)]


def _word_count(s: str) -> int:
    return len(s.split())


# ---- responders ----

def _strip_question_head(q: str) -> str:
    head = q.strip().rstrip("?").strip()
    head = re.sub(
        r"^(how did|how much did|how much|how many|what was|what were|what is|what are|when did|when was|tell me about)\s+",
        "",
        head,
        flags=re.I,
    )
    return head


def _plan(payload: dict) -> dict:
    question = str(payload.get("question", "")).strip()
    m = re.search(r"\bbetween\s+((?:19|20)\d{2})\s+and\s+((?:19|20)\d{2})\b", question, re.I)
    if m:
        y1, y2 = m.group(1), m.group(2)
        subject = _strip_question_head(question[: m.start()])
        subject = re.sub(r"\s+(change|evolve|develop|grow|move|vary)$", "", subject, flags=re.I)
        return {
            "sub_queries": [
                f"{subject} in {y1}",
                f"{subject} in {y2}",
                f"change in {subject} between {y1} and {y2}",
            ]
        }
    body = question.strip().rstrip("?")
    if " and " in body:
        parts = [p.strip(" ,") for p in body.split(" and ") if p.strip(" ,")]
        if len(parts) > 1:
            trailing_year = _years_of(parts[-1])
            subs = []
            for part in parts:
                if trailing_year and not _years_of(part):
                    subs.append(f"{part} in {trailing_year[-1]}")
                else:
                    subs.append(part)
            return {"sub_queries": subs}
    return {"sub_queries": [question]}


# Broadening words the replanner appends to widen recall.  The validator must
# not count them as evidence, or replanned queries would match any filing that
# merely mentions a report.
_REPLAN_FILLER = frozenset({"report", "disclosure", "details", "retry"})


def _replan(payload: dict) -> dict:
    question = str(payload.get("question", "")).strip()
    prior = [str(s) for s in payload.get("prior_sub_queries", [])]
    kws = content_tokens(question)
    candidates = [
        " ".join(kws),
        " ".join(kws) + " report",
        " ".join(kws) + " disclosure",
        question.rstrip("?") + " details",
    ]
    fresh = [c for c in candidates if c and c not in prior]
    if not fresh:
        fresh = [question.rstrip("?") + " retry"]
    return {"sub_queries": fresh[:2]}


def _prepare_search(payload: dict) -> dict:
    sub_query = str(payload.get("sub_query", "")).strip()
    companies: Sequence[str] = payload.get("companies") or []
    report_types: Sequence[str] = payload.get("report_types") or []
    toks = set(_tokens(sub_query))

    matched_companies = sorted(c for c in companies if _name_in_text(c, toks))
    low = sub_query.lower()
    matched_types = sorted(rt for rt in report_types if rt.lower() in low)

    years = sorted(set(_years_of(sub_query)))
    date_start = f"{years[0]}-01-01" if years else None
    date_end = f"{years[-1]}-12-31" if years else None

    keywords = [t for t in content_tokens(sub_query) if not _YEAR_RE.fullmatch(t)][:8]
    return {
        "semantic_query": sub_query,
        "keywords": keywords,
        "company_names": matched_companies,
        "report_types": matched_types,
        "date_start": date_start,
        "date_end": date_end,
    }


def _validate(payload: dict) -> dict:
    sub_query = str(payload.get("sub_query", ""))
    chunk_text = str(payload.get("chunk_text", ""))
    chunk_toks = set(_tokens(chunk_text))

    years = set(_years_of(sub_query))
    missing_years = sorted(y for y in years if y not in chunk_toks)
    if missing_years:
        return {"approved": False, "reason": f"years {missing_years} not present in passage"}

    toks = [
        t
        for t in content_tokens(sub_query)
        if not _YEAR_RE.fullmatch(t) and t not in _REPLAN_FILLER
    ]
    if not toks:
        return {"approved": True, "reason": "no content terms to check"}
    present = sum(1 for t in toks if t in chunk_toks)
    if present * 2 > len(toks):
        return {"approved": True, "reason": f"{present}/{len(toks)} query terms present"}
    return {"approved": False, "reason": f"only {present}/{len(toks)} query terms present"}


_SOURCE_RE = re.compile(
    r"<source\s+id=\"(?P<id>[^\"]*)\"[^>]*>\n(?P<body>.*?)\n</source>", re.S
)
_EXCERPT_RE = re.compile(r"^Excerpt (\d+):$", re.M)


def _first_fact_sentence(text: str) -> str:
    # first sentence containing a digit, else the first non-blank line;
    # a period between digits is a decimal point, not a boundary
    for raw in re.split(r"[!?\n|]|\.(?!\d)", text):
        s = raw.strip(" -|")
        if len(s) >= 8 and any(ch.isdigit() for ch in s):
            return s + "."
    for line in text.splitlines():
        if line.strip():
            return line.strip().rstrip(".") + "."
    return "No excerpt text available."


def _write(payload: dict) -> dict:
    context = str(payload.get("context", ""))
    sources = []
    for m in _SOURCE_RE.finditer(context):
        body = m.group("body")
        split = _EXCERPT_RE.split(body)
        first_excerpt = split[2] if len(split) >= 3 else body
        sources.append((m.group("id"), first_excerpt.strip()))
    if not sources:
        return {
            "text": "The retrieved material does not contain the requested information.",
            "citations": [],
            "calculations": [],
        }
    parts = []
    citations = []
    for marker, (report_id, excerpt) in enumerate(sources[:2], start=1):
        parts.append(f"{_first_fact_sentence(excerpt)} [{marker}]")
        citations.append({"marker": marker, "report_id": report_id, "excerpt_id": 1})
    return {"text": " ".join(parts), "citations": citations, "calculations": []}


def _route(payload: dict) -> dict:
    message = str(payload.get("message", ""))
    is_first = bool(payload.get("is_first_message", not payload.get("history")))
    if is_first:
        return {"action": "full_retrieval", "reason": "first message in the conversation"}
    low = message.lower()
    toks = set(_tokens(message))
    companies: Sequence[str] = payload.get("companies") or []
    mentions_company = any(_name_in_text(c, toks) for c in companies)
    mentions_year = bool(_YEAR_RE.search(message))
    wants_reformat = any(marker in low for marker in _REFORMAT_MARKERS)
    if wants_reformat and not mentions_company and not mentions_year:
        return {"action": "direct_answer", "reason": "reformatting request, no new information need"}
    return {"action": "full_retrieval", "reason": "message introduces a new information need"}


def _respond(payload: dict) -> dict:
    message = str(payload.get("message", "")).lower()
    prior = str(payload.get("prior_answer", "")).strip()
    if not prior:
        return {"text": "There is no previous answer to restate."}
    if "bullet" in message:
        sentences = [s.strip() for s in re.split(r"(?<=[.!?])\s+", prior) if s.strip()]
        return {"text": "\n".join("- " + s for s in sentences)}
    if "one sentence" in message or "shorter" in message:
        first = re.split(r"(?<=[.!?])\s+", prior)[0]
        return {"text": first.strip()}
    return {"text": prior}


def _extract(payload: dict) -> dict:
    prefix = str(payload.get("prefix", ""))
    source_name = str(payload.get("source_name", ""))

    company = ""
    for line in prefix.splitlines():
        s = line.strip()
        if s.startswith("#"):
            company = s.lstrip("#").strip()
            break
    if not company:
        for line in prefix.splitlines():
            if line.strip():
                company = line.strip()
                break
    # strip a report-type phrase accidentally captured from the heading
    for rt in _REPORT_TYPES:
        company = re.sub(rf"\s*[-–—:]\s*{re.escape(rt)}.*$", "", company, flags=re.I)

    report_type = ""
    best_pos = len(prefix) + 1
    low = prefix.lower()
    for rt in _REPORT_TYPES:
        pos = low.find(rt.lower())
        if pos != -1 and pos < best_pos:
            best_pos = pos
            report_type = rt

    date = None
    m = re.search(r"\b(\d{4})-(\d{2})-(\d{2})\b", prefix)
    if m:
        date = m.group(0)
    else:
        m = re.search(
            r"\b(January|February|March|April|May|June|July|August|September|October|November|December)"
            r"\s+(\d{1,2}),\s+((?:19|20)\d{2})\b",
            prefix,
        )
        if m:
            months = (
                "January February March April May June July August "
                "September October November December"
            ).split()
            date = f"{m.group(3)}-{months.index(m.group(1)) + 1:02d}-{int(m.group(2)):02d}"

    summary = ""
    for para in re.split(r"\n\s*\n", prefix):
        p = " ".join(para.split())
        if len(p) >= 40 and not para.lstrip().startswith(("#", "|")):
            summary = p[:300]
            break

    counts: dict[str, int] = {}
    order: dict[str, int] = {}
    skip = set(_tokens(company)) | set(_tokens(report_type))
    for i, tok in enumerate(_tokens(prefix)):
        if tok in _STOPWORDS or _YEAR_RE.fullmatch(tok) or tok.isdigit() or tok in skip:
            continue
        if len(tok) < 3:
            continue
        counts[tok] = counts.get(tok, 0) + 1
        order.setdefault(tok, i)
    keywords = sorted(counts, key=lambda t: (-counts[t], order[t]))[:5]

    title = ""
    if report_type and date:
        title = f"{report_type} – {date[:4]} ({company})"
    return {
        "title": title,
        "company_name": company,
        "keywords": keywords,
        "summary": summary or f"Document ingested from {source_name}.",
        "date": date,
        "report_type": report_type,
    }


_NUM_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


def _numbers(text: str) -> list[float]:
    out = []
    for m in _NUM_RE.finditer(text):
        try:
            out.append(float(m.group(0).replace(",", "")))
        except ValueError:
            continue
    return out


def _norm_answer(text: str) -> str:
    return " ".join(_tokens(text))


def _judge(payload: dict) -> dict:
    answer = str(payload.get("answer", ""))
    gold = str(payload.get("gold_answer", ""))
    low = answer.lower()
    if any(marker in low for marker in _DECLINE_MARKERS):
        return {"verdict": "FailureToAnswer", "reason": "answer explicitly declines"}
    if _norm_answer(gold) and _norm_answer(gold) in _norm_answer(answer):
        return {"verdict": "Correct", "reason": "gold answer contained verbatim"}
    gold_nums = _numbers(gold)
    if gold_nums:
        answer_nums = _numbers(answer)
        for g in gold_nums:
            tol = abs(g) * 0.01
            if not any(abs(a - g) <= (tol if tol > 0 else 1e-9) for a in answer_nums):
                return {"verdict": "Incorrect", "reason": f"no value within 1% of {g}"}
        return {"verdict": "Correct", "reason": "all gold figures matched within 1%"}
    return {"verdict": "Incorrect", "reason": "gold answer not found in response"}


_HANDLERS: dict[str, Callable[[dict], dict]] = {
    "planner": _plan,
    "replanner": _replan,
    "search": _prepare_search,
    "validator": _validate,
    "writer": _write,
    "router": _route,
    "responder": _respond,
    "extractor": _extract,
    "judge": _judge,
}


class OfflineRuleProvider:
    """Deterministic provider: responses are pure functions of call.payload."""

    name = "offline-rules"

    def complete(self, call: AgentCall, messages: list[dict[str, str]], model_id: str) -> Completion:
        handler = _HANDLERS.get(call.agent_name)
        if handler is None:
            raise KeyError(f"no offline responder for agent {call.agent_name!r}")
        text = json.dumps(handler(call.payload), sort_keys=True)
        input_tokens = sum(_word_count(m["content"]) for m in messages)
        return Completion(text, input_tokens, _word_count(text))


class ScriptedProvider:
    """Replays a fixed sequence of response texts; used to inject malformed
    output and provider faults in tests. Entries may be strings or callables
    of (call, messages)."""

    name = "scripted"

    def __init__(self, responses: Sequence[str | Callable[[AgentCall, list], str]]):
        self._responses = list(responses)
        self.calls = 0
        self.transcripts: list[list[dict[str, str]]] = []
        self._lock = threading.Lock()

    def complete(self, call: AgentCall, messages: list[dict[str, str]], model_id: str) -> Completion:
        with self._lock:
            if self.calls >= len(self._responses):
                raise AssertionError("scripted provider exhausted")
            entry = self._responses[self.calls]
            self.calls += 1
            self.transcripts.append([dict(m) for m in messages])
        text = entry(call, messages) if callable(entry) else entry
        return Completion(text, sum(_word_count(m["content"]) for m in messages), _word_count(text))

"""Document metadata extraction and company-name normalization.

The first ~1024 whitespace tokens of a document (extended so a Markdown
table row is never cut) go to the extractor agent, which fills the catalog
metadata record. Company names are standardized against the names already
in the local index, with SEC EDGAR and the Danish CVR register as fallback
lookups. Registry clients support a recorded-fixture mode so everything
runs offline.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass

import httpx

from .corpus import Document, is_table_row
from .gateway import GatewayError, LlmGateway
from .store import HybridIndex, ReportMetadata

__all__ = [
    "CvrClient",
    "EdgarClient",
    "RegistryClients",
    "RegistryMatch",
    "compose_title",
    "extract_metadata",
    "extract_or_placeholder",
    "normalize_company",
    "take_prefix",
]

logger = logging.getLogger(__name__)

_SOURCES = frozenset({"local-fts", "sec-edgar", "cvr"})


@dataclass(frozen=True)
class RegistryMatch:
    query: str
    canonical: str
    source: str
    confidence: float

    def __post_init__(self) -> None:
        if self.source not in _SOURCES:
            raise ValueError(f"unknown registry source {self.source!r}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def take_prefix(doc: Document, n_tokens: int = 1024) -> str:
    """First n_tokens whitespace-separated tokens of the document, extended
    to the end of the line when the cut would land inside a table row."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be > 0")
    text = doc.content
    end = None
    for count, m in enumerate(re.finditer(r"\S+", text), start=1):
        if count == n_tokens:
            end = m.end()
            break
    if end is None:
        return text
    line_start = text.rfind("\n", 0, end) + 1
    line_end = text.find("\n", end)
    if line_end == -1:
        line_end = len(text)
    if is_table_row(text[line_start:line_end]) and end < line_end:
        end = line_end
    return text[:end]


def compose_title(meta: ReportMetadata, fallback: str = "") -> ReportMetadata:
    """Title is composed by code: "<report type> – <year> (<company>)" when
    all parts are known, else the existing title or the fallback."""
    if meta.report_type and meta.company_name and meta.date is not None:
        title = f"{meta.report_type} – {meta.date.year} ({meta.company_name})"
    else:
        title = meta.title or fallback
    return meta.model_copy(update={"title": title})


def extract_metadata(prefix: str, gateway: LlmGateway, *, source_name: str = "") -> ReportMetadata:
    """Run the extractor agent on a document prefix. Schema violations go
    through the gateway's correct-and-retry cycle before surfacing."""
    if not prefix.strip():
        raise ValueError("document prefix is empty")
    meta, _usage = gateway.run_agent(
        "extractor",
        {"source_name": source_name, "prefix": prefix},
        ReportMetadata,
        stage="extract",
    )
    return compose_title(meta, source_name)


def extract_or_placeholder(
    prefix: str, gateway: LlmGateway, *, source_name: str = ""
) -> tuple[ReportMetadata, bool]:
    """extract_metadata with degradation: a document whose extraction fails
    outright is still indexed, under placeholder metadata, and flagged; a
    document without a discoverable date keeps empty date and is flagged."""
    try:
        meta = extract_metadata(prefix, gateway, source_name=source_name)
    except GatewayError as err:
        logger.warning("metadata extraction failed for %s: %s", source_name, err)
        return ReportMetadata(title=source_name, keywords=[]), True
    return meta, meta.date is None


# ---- registry clients ----

def _name_tokens(name: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", name.lower()))


def _jaccard(a: str, b: str) -> float:
    ta, tb = _name_tokens(a), _name_tokens(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


class _FixtureMixin:
    def _fixture_body(self, name: str, extension: str) -> str | None:
        assert self._fixture_dir is not None
        path = os.path.join(self._fixture_dir, f"{_slug(name)}.{extension}")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return fh.read()


class EdgarClient(_FixtureMixin):
    """SEC EDGAR company lookup (atom output of the browse-edgar endpoint)."""

    source = "sec-edgar"

    def __init__(
        self,
        base_url: str | None = None,
        *,
        client: httpx.Client | None = None,
        fixture_dir: str | None = None,
        timeout: float = 10.0,
        user_agent: str = "finrag/0.1 (contact: ops@example.com)",
    ):
        self._base = (base_url or os.environ.get("FINRAG_EDGAR_URL", "https://www.sec.gov")).rstrip("/")
        self._client = client
        self._fixture_dir = fixture_dir
        self._timeout = timeout
        self._user_agent = user_agent

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self._timeout)
        return self._client

    def lookup(self, name: str) -> tuple[str, float] | None:
        if self._fixture_dir is not None:
            body = self._fixture_body(name, "atom")
        else:
            try:
                resp = self._http().get(
                    f"{self._base}/cgi-bin/browse-edgar",
                    params={"action": "getcompany", "company": name, "output": "atom"},
                    headers={"User-Agent": self._user_agent},
                )
                resp.raise_for_status()
                body = resp.text
            except httpx.HTTPError as err:
                logger.warning("EDGAR lookup failed for %r: %s", name, err)
                return None
        if body is None:
            return None
        names = re.findall(r"<conformed-name>([^<]+)</conformed-name>", body)
        if not names:
            # fall back to entry titles, skipping the feed title
            names = re.findall(r"<title>([^<]+)</title>", body)[1:]
        best = None
        for candidate in names:
            conf = _jaccard(name, candidate)
            if best is None or conf > best[1]:
                best = (candidate.strip(), conf)
        return best


class CvrClient(_FixtureMixin):
    """Danish central business register lookup."""

    source = "cvr"

    def __init__(
        self,
        base_url: str | None = None,
        *,
        client: httpx.Client | None = None,
        fixture_dir: str | None = None,
        timeout: float = 10.0,
        token: str | None = None,
    ):
        self._base = (base_url or os.environ.get("FINRAG_CVR_URL", "https://cvrapi.dk")).rstrip("/")
        self._client = client
        self._fixture_dir = fixture_dir
        self._timeout = timeout
        self._token = token if token is not None else os.environ.get("FINRAG_CVR_TOKEN")

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self._timeout)
        return self._client

    def lookup(self, name: str) -> tuple[str, float] | None:
        if self._fixture_dir is not None:
            body = self._fixture_body(name, "json")
            if body is None:
                return None
            import json as _json

            data = _json.loads(body)
        else:
            try:
                headers = {"Authorization": f"Bearer {self._token}"} if self._token else {}
                resp = self._http().get(
                    f"{self._base}/api",
                    params={"search": name, "country": "dk"},
                    headers=headers,
                )
                resp.raise_for_status()
                data = resp.json()
            except (httpx.HTTPError, ValueError) as err:
                logger.warning("CVR lookup failed for %r: %s", name, err)
                return None
        candidates: list[str] = []
        if isinstance(data, dict):
            if isinstance(data.get("name"), str):
                candidates.append(data["name"])
            for hit in data.get("hits", []):
                if isinstance(hit, dict) and isinstance(hit.get("name"), str):
                    candidates.append(hit["name"])
        elif isinstance(data, list):
            candidates.extend(h["name"] for h in data if isinstance(h, dict) and "name" in h)
        best = None
        for candidate in candidates:
            conf = _jaccard(name, candidate)
            if best is None or conf > best[1]:
                best = (candidate.strip(), conf)
        return best


@dataclass
class RegistryClients:
    edgar: EdgarClient | None = None
    cvr: CvrClient | None = None

    @classmethod
    def from_fixtures(cls, fixture_dir: str) -> "RegistryClients":
        return cls(
            edgar=EdgarClient(fixture_dir=os.path.join(fixture_dir, "edgar")),
            cvr=CvrClient(fixture_dir=os.path.join(fixture_dir, "cvr")),
        )

    @classmethod
    def from_env(cls) -> "RegistryClients":
        fixture_dir = os.environ.get("FINRAG_REGISTRY_FIXTURES")
        if fixture_dir:
            return cls.from_fixtures(fixture_dir)
        return cls(edgar=EdgarClient(), cvr=CvrClient())


def normalize_company(
    name: str,
    index: HybridIndex,
    registries: RegistryClients | None = None,
    *,
    threshold: float = 0.85,
) -> RegistryMatch:
    """Standardize a company name: local index first, registries when the
    local match is weak, verbatim passthrough when everything misses.
    Registry failures are logged and treated as no-match; ingestion never
    aborts on them."""
    if not name or not name.strip():
        raise ValueError("company name is empty")
    name = name.strip()
    registries = registries or RegistryClients()

    candidates: list[RegistryMatch] = []
    local = index.match_company(name) if index is not None else None
    if local is not None:
        local_match = RegistryMatch(name, local[0], "local-fts", local[1])
        if local_match.confidence >= threshold:
            return local_match
        candidates.append(local_match)

    for client in (registries.edgar, registries.cvr):
        if client is None:
            continue
        try:
            got = client.lookup(name)
        except Exception as err:  # noqa: BLE001 - any registry fault is a no-match
            logger.warning("registry %s failed for %r: %s", client.source, name, err)
            got = None
        if got is not None:
            candidates.append(RegistryMatch(name, got[0], client.source, min(got[1], 1.0)))

    if candidates:
        best = max(candidates, key=lambda m: m.confidence)
        if best.confidence > 0.0:
            return best
    return RegistryMatch(name, name, "local-fts", 0.0)

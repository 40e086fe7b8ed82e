"""Uniform client for chat-completion and embedding providers.

Provides schema-validated structured output with a correct-and-retry cycle,
deterministic offline embedding, token/cost accounting, an audit log, and the
counting limiter that caps concurrent provider calls.
"""
from __future__ import annotations

import json
import logging
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from hashlib import blake2b
from importlib import resources
from string import Template
from typing import Iterator, Mapping, Protocol, Sequence

import httpx
import numpy as np
from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "AgentCall",
    "AuditLog",
    "Completion",
    "ConcurrencyLimiter",
    "EmbeddingError",
    "EmbeddingVector",
    "GatewayError",
    "HashEmbedder",
    "LlmGateway",
    "OpenAIChatProvider",
    "OpenAIEmbeddingProvider",
    "StructuredOutputError",
    "UsageRecord",
    "account",
    "relative_cost",
    "DEFAULT_PRICES",
]

# USD per 1M tokens (input, output), current OpenAI list prices.
DEFAULT_PRICES: dict[str, tuple[float, float]] = {
    "gpt-4o": (2.50, 10.00),
    "gpt-4.1": (2.00, 8.00),
    "gpt-4.1-mini": (0.40, 1.60),
    "o4-mini": (1.10, 4.40),
}

# Models that reject an explicit temperature parameter.
NO_TEMPERATURE_MODELS = frozenset({"o4-mini"})


class GatewayError(RuntimeError):
    pass


class StructuredOutputError(GatewayError):
    """Raised when every attempt failed schema or semantic validation.

    Carries the full transcript of attempts and the usage spent on them.
    """

    def __init__(self, agent_name: str, attempts: list[dict], usage: "UsageRecord"):
        super().__init__(
            f"agent {agent_name!r}: output failed validation after {len(attempts)} attempts"
        )
        self.agent_name = agent_name
        self.attempts = attempts
        self.usage = usage


class EmbeddingError(GatewayError):
    def __init__(self, indices: list[int], cause: str):
        super().__init__(f"embedding failed for batch indices {indices}: {cause}")
        self.indices = indices


class EmbeddingVector:
    """Fixed-length real vector with a cached L2 norm."""

    __slots__ = ("values", "norm")

    def __init__(self, values: Sequence[float] | np.ndarray):
        self.values = np.asarray(values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValueError("embedding vector must be one-dimensional")
        self.norm = float(np.linalg.norm(self.values.astype(np.float64)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EmbeddingVector)
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim}, norm={self.norm:.4f})"


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    num = float(np.dot(a.values.astype(np.float64), b.values.astype(np.float64)))
    return num / (a.norm * b.norm)


@dataclass(frozen=True)
class UsageRecord:
    input_tokens: int
    output_tokens: int
    model_id: str
    cost_usd: float = 0.0


def merge_usage(records: Sequence[UsageRecord], model_id: str | None = None) -> UsageRecord:
    """Sum token counts and cost over records; model_id defaults to the last
    record's (or 'aggregate' when empty)."""
    if not records:
        return UsageRecord(0, 0, model_id or "aggregate", 0.0)
    return UsageRecord(
        input_tokens=sum(r.input_tokens for r in records),
        output_tokens=sum(r.output_tokens for r in records),
        model_id=model_id or records[-1].model_id,
        cost_usd=round(sum(r.cost_usd for r in records), 10),
    )


@dataclass
class AgentCall:
    """One structured agent invocation.

    ``payload`` holds the structured inputs the user prompt was rendered
    from; deterministic offline providers consume it directly instead of
    re-parsing prose.
    """

    agent_name: str
    system_prompt: str
    user_prompt: str
    response_schema: type[BaseModel]
    temperature: float = 0.1
    max_retries: int = 3
    payload: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must be within [0, 2]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class Completion:
    __slots__ = ("text", "input_tokens", "output_tokens")

    def __init__(self, text: str, input_tokens: int, output_tokens: int):
        self.text = text
        self.input_tokens = input_tokens
        self.output_tokens = output_tokens


class Provider(Protocol):
    name: str

    def complete(self, call: AgentCall, messages: list[dict[str, str]], model_id: str) -> Completion:
        ...


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        ...


class ConcurrencyLimiter:
    """Counting semaphore with an instrumented high-water mark."""

    def __init__(self, limit: int):
        if limit < 1:
            raise ValueError("concurrency limit must be >= 1")
        self.limit = limit
        self._sem = threading.BoundedSemaphore(limit)
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    @contextmanager
    def slot(self) -> Iterator[None]:
        self._sem.acquire()
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        try:
            yield
        finally:
            with self._lock:
                self.current -= 1
            self._sem.release()


class AuditLog:
    """Thread-safe list of per-call audit records, optionally mirrored to a
    newline-delimited JSON file."""

    def __init__(self, path: str | None = None):
        self.records: list[dict] = []
        self._path = path
        self._lock = threading.Lock()

    def record(self, stage: str, **extra: object) -> None:
        entry: dict = {"stage": stage, **extra}
        with self._lock:
            self.records.append(entry)
            if self._path:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, default=str, sort_keys=True) + "\n")

    def stages(self) -> list[str]:
        with self._lock:
            return [r["stage"] for r in self.records]

    def clear(self) -> None:
        with self._lock:
            self.records.clear()


# ---- providers ----

class OpenAIChatProvider:
    """Chat-completions client for any OpenAI-compatible endpoint."""

    name = "openai-chat"

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        client: httpx.Client | None = None,
        timeout: float = 60.0,
        no_temperature_models: frozenset[str] = NO_TEMPERATURE_MODELS,
    ):
        self._client = client or httpx.Client(timeout=timeout)
        self._base_url = base_url.rstrip("/")
        self._api_key = api_key
        self._no_temperature = no_temperature_models

    def complete(self, call: AgentCall, messages: list[dict[str, str]], model_id: str) -> Completion:
        body: dict = {"model": model_id, "messages": messages}
        if model_id not in self._no_temperature:
            body["temperature"] = call.temperature
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        resp = self._client.post(f"{self._base_url}/chat/completions", json=body, headers=headers)
        resp.raise_for_status()
        data = resp.json()
        usage = data.get("usage", {})
        return Completion(
            text=data["choices"][0]["message"]["content"],
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
        )


class OpenAIEmbeddingProvider:
    name = "openai-embeddings"

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key: str = "",
        *,
        dim: int = 768,
        client: httpx.Client | None = None,
        timeout: float = 60.0,
    ):
        self._client = client or httpx.Client(timeout=timeout)
        self._base_url = base_url.rstrip("/")
        self._model_id = model_id
        self._api_key = api_key
        self.dim = dim

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        resp = self._client.post(
            f"{self._base_url}/embeddings",
            json={"model": self._model_id, "input": list(texts)},
            headers=headers,
        )
        resp.raise_for_status()
        rows = sorted(resp.json()["data"], key=lambda r: r["index"])
        return [row["embedding"] for row in rows]


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashEmbedder:
    """Deterministic feature-hash embedder for offline use.

    Hashes word unigrams and bigrams into signed buckets and L2-normalizes;
    the same text always maps to the same vector, independent of process or
    platform.
    """

    name = "hash-embedder"

    def __init__(self, dim: int = 768):
        self.dim = dim

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._one(t) for t in texts]

    def _one(self, text: str) -> list[float]:
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = _TOKEN_RE.findall(text.lower())
        features = tokens + [a + "_" + b for a, b in zip(tokens, tokens[1:])]
        for feat in features:
            h = int.from_bytes(blake2b(feat.encode("utf-8"), digest_size=8).digest(), "little")
            sign = 1.0 if (h >> 1) & 1 else -1.0
            vec[h % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec.tolist()


# ---- accounting ----

def relative_cost(price_in: float, price_out: float, accuracy_pct: float) -> float:
    """(input price + output price per 1M tokens) / accuracy, 3 decimals."""
    if accuracy_pct <= 0:
        raise ValueError("accuracy_pct must be > 0; relative cost undefined")
    return round((price_in + price_out) / accuracy_pct, 3)


def account(
    records: Sequence[UsageRecord],
    accuracy_pct: float,
    prices: Mapping[str, tuple[float, float]] | None = None,
) -> float:
    """Relative cost of a run: list price of the dominant model (the one that
    produced the most output tokens) divided by accuracy percentage."""
    if accuracy_pct <= 0:
        raise ValueError("accuracy_pct must be > 0; relative cost undefined")
    if not records:
        raise ValueError("no usage records to account")
    table = DEFAULT_PRICES if prices is None else prices
    out_by_model: dict[str, int] = {}
    for r in records:
        out_by_model[r.model_id] = out_by_model.get(r.model_id, 0) + r.output_tokens
    model = max(sorted(out_by_model), key=lambda m: out_by_model[m])
    price_in, price_out = table.get(model, (0.0, 0.0))
    return relative_cost(price_in, price_out, accuracy_pct)


# ---- the gateway ----

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\n(.*)\n```\s*$", re.S)


def _strip_fences(text: str) -> str:
    m = _FENCE_RE.match(text.strip())
    return m.group(1) if m else text


def _template_text(agent_name: str) -> str:
    ref = resources.files("finrag").joinpath(f"templates/{agent_name}.txt")
    try:
        return ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        return (
            "You are the $agent agent in a document question answering system.\n"
            "Follow the task in the user message.\n"
            "Respond with a single JSON object matching this schema:\n$schema\n"
        )


class LlmGateway:
    """Binds a provider, an embedder, per-agent model ids, and a price table
    behind structured-output and embedding calls."""

    def __init__(
        self,
        provider: Provider,
        embedder: EmbeddingProvider,
        *,
        models: Mapping[str, str] | None = None,
        prices: Mapping[str, tuple[float, float]] | None = None,
        temperature: float = 0.1,
        max_retries: int = 3,
        limiter: ConcurrencyLimiter | None = None,
        audit: AuditLog | None = None,
        embed_retries: int = 1,
    ):
        self.provider = provider
        self.embedder = embedder
        self.models = dict(models or {})
        self.prices = dict(DEFAULT_PRICES if prices is None else prices)
        self.temperature = temperature
        self.max_retries = max_retries
        self.limiter = limiter
        self.audit = audit or AuditLog()
        self._embed_retries = embed_retries

    # ---- model and price resolution ----

    def model_for(self, agent_name: str) -> str:
        return self.models.get(agent_name, self.models.get("default", "offline-rules"))

    def usage(self, input_tokens: int, output_tokens: int, model_id: str) -> UsageRecord:
        price_in, price_out = self.prices.get(model_id, (0.0, 0.0))
        cost = input_tokens * price_in / 1e6 + output_tokens * price_out / 1e6
        return UsageRecord(input_tokens, output_tokens, model_id, round(cost, 10))

    # ---- structured completion ----

    def agent_call(
        self,
        agent_name: str,
        payload: dict,
        schema: type[BaseModel],
        *,
        temperature: float | None = None,
        max_retries: int | None = None,
    ) -> AgentCall:
        schema_json = json.dumps(schema.model_json_schema(), indent=2, sort_keys=True)
        system = Template(_template_text(agent_name)).safe_substitute(
            schema=schema_json, agent=agent_name
        )
        user = json.dumps(payload, indent=2, sort_keys=True, default=str)
        return AgentCall(
            agent_name=agent_name,
            system_prompt=system,
            user_prompt=user,
            response_schema=schema,
            temperature=self.temperature if temperature is None else temperature,
            max_retries=self.max_retries if max_retries is None else max_retries,
            payload=payload,
        )

    def complete_structured(
        self,
        call: AgentCall,
        provider: Provider | None = None,
        *,
        validate=None,
    ) -> tuple[BaseModel, UsageRecord]:
        """Run the call, validating output against the schema; on failure a
        correction message (schema + error) is appended and the provider is
        re-invoked, up to ``call.max_retries`` extra times. Usage accumulates
        across attempts."""
        prov = provider or self.provider
        model_id = self.model_for(call.agent_name)
        messages = [
            {"role": "system", "content": call.system_prompt},
            {"role": "user", "content": call.user_prompt},
        ]
        attempts: list[dict] = []
        total_in = 0
        total_out = 0
        for _attempt in range(call.max_retries + 1):
            if self.limiter is not None:
                with self.limiter.slot():
                    completion = prov.complete(call, messages, model_id)
            else:
                completion = prov.complete(call, messages, model_id)
            total_in += completion.input_tokens
            total_out += completion.output_tokens
            try:
                obj = call.response_schema.model_validate_json(_strip_fences(completion.text))
                if validate is not None:
                    validate(obj)
                return obj, self.usage(total_in, total_out, model_id)
            except (ValidationError, ValueError) as err:
                attempts.append({"response": completion.text, "error": str(err)})
                schema_json = json.dumps(
                    call.response_schema.model_json_schema(), indent=2, sort_keys=True
                )
                correction = (
                    f"Your previous response failed validation: {err}\n"
                    "Respond again with a single JSON object (no prose, no code "
                    f"fences) matching this schema:\n{schema_json}"
                )
                messages = messages + [
                    {"role": "assistant", "content": completion.text},
                    {"role": "user", "content": correction},
                ]
        raise StructuredOutputError(
            call.agent_name, attempts, self.usage(total_in, total_out, model_id)
        )

    def run_agent(
        self,
        agent_name: str,
        payload: dict,
        schema: type[BaseModel],
        *,
        validate=None,
        stage: str | None = None,
        round_no: int | None = None,
        temperature: float | None = None,
        max_retries: int | None = None,
    ) -> tuple[BaseModel, UsageRecord]:
        """agent_call + complete_structured + one audit record."""
        call = self.agent_call(
            agent_name, payload, schema, temperature=temperature, max_retries=max_retries
        )
        started = time.time()
        try:
            obj, usage = self.complete_structured(call, validate=validate)
        except StructuredOutputError as err:
            self.audit.record(
                stage or agent_name,
                round=round_no,
                model=self.model_for(agent_name),
                ok=False,
                error=str(err),
                input_tokens=err.usage.input_tokens,
                output_tokens=err.usage.output_tokens,
                cost_usd=err.usage.cost_usd,
                seconds=round(time.time() - started, 6),
            )
            raise
        self.audit.record(
            stage or agent_name,
            round=round_no,
            model=usage.model_id,
            ok=True,
            input_tokens=usage.input_tokens,
            output_tokens=usage.output_tokens,
            cost_usd=usage.cost_usd,
            seconds=round(time.time() - started, 6),
        )
        return obj, usage

    # ---- embeddings ----

    def embed(
        self, texts: Sequence[str], provider: EmbeddingProvider | None = None
    ) -> list[EmbeddingVector]:
        """One vector per input text, order preserved."""
        if not texts:
            return []
        emb = provider or self.embedder
        last_error: Exception | None = None
        for _attempt in range(self._embed_retries + 1):
            try:
                rows = emb.embed_batch(list(texts))
                if len(rows) != len(texts):
                    raise GatewayError(
                        f"embedder returned {len(rows)} vectors for {len(texts)} texts"
                    )
                return [EmbeddingVector(row) for row in rows]
            except Exception as err:  # noqa: BLE001 - provider faults surface uniformly
                last_error = err
                logger.warning("embedding batch failed, retrying: %s", err)
        raise EmbeddingError(list(range(len(texts))), str(last_error))

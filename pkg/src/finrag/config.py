"""Service configuration and runtime wiring.

Configuration comes from an optional YAML file overlaid with FINRAG_*
environment variables (double underscore descends into sections, e.g.
FINRAG_PROVIDER__KIND=offline, FINRAG_PIPELINE__MAX_ROUNDS=2). Validation
happens once at startup; failures abort with field-level messages.
build_runtime turns a validated config into the live objects the HTTP
service and the CLI share.
"""
from __future__ import annotations

import datetime as dt
import os
from dataclasses import dataclass, field
from typing import Literal, Mapping

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agents import PipelineConfig, PipelineDeps
from .conversations import ConversationStore
from .extractor import RegistryClients
from .gateway import (
    AuditLog,
    ConcurrencyLimiter,
    EmbeddingProvider,
    HashEmbedder,
    LlmGateway,
    OpenAIChatProvider,
    OpenAIEmbeddingProvider,
    Provider,
)
from .offline import OfflineRuleProvider
from .store import HybridIndex

__all__ = ["ConfigError", "PipelineSettings", "ProviderSettings", "Runtime", "ServiceConfig", "build_runtime", "load_config"]

VERSION = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration, with one message line per offending field."""


class ProviderSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["offline", "openai"] = "offline"
    base_url: str = ""
    api_key: str = ""
    embedding_model: str = ""
    embedding_dim: int = Field(default=768, gt=0)
    models: dict[str, str] = Field(default_factory=dict)
    temperature: float = Field(default=0.1, ge=0.0, le=2.0)
    max_retries: int = Field(default=3, ge=0)
    concurrency: int = Field(default=12, ge=1)
    timeout: float = Field(default=60.0, gt=0.0)

    @model_validator(mode="after")
    def _openai_needs_endpoints(self) -> "ProviderSettings":
        if self.kind == "openai":
            missing = [
                name
                for name, value in (
                    ("base_url", self.base_url),
                    ("embedding_model", self.embedding_model),
                )
                if not value
            ]
            if missing:
                raise ValueError(f"provider kind 'openai' requires {', '.join(missing)}")
            if "default" not in self.models:
                raise ValueError("provider kind 'openai' requires models.default")
        return self


class PipelineSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_rounds: int = Field(default=3, ge=1)
    max_reports: int = Field(default=5, ge=1)
    top_k: int = Field(default=10, ge=1)
    concurrency: int = Field(default=12, ge=1)
    disable_planner: bool = False
    disable_validator: bool = False
    disable_metadata: bool = False
    naive_mode: bool = False

    def to_config(self) -> PipelineConfig:
        return PipelineConfig(**self.model_dump())


class ServiceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    store_path: str = "finrag_store"
    conversations_path: str = ""
    host: str = "127.0.0.1"
    port: int = Field(default=8765, ge=1, le=65535)
    auth_token: str | None = None
    provider: ProviderSettings = Field(default_factory=ProviderSettings)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)

    @model_validator(mode="after")
    def _default_conversations_path(self) -> "ServiceConfig":
        if not self.conversations_path:
            object.__setattr__(
                self, "conversations_path", os.path.join(self.store_path, "conversations.sqlite3")
            )
        return self


def _format_validation_error(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        loc = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{loc}: {item['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def _assign(data: dict, keys: list[str], value: object) -> None:
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value


def load_config(path: str | None = None, env: Mapping[str, str] = os.environ) -> ServiceConfig:
    """YAML file (optional) overlaid with FINRAG_* environment variables.

    Env values are parsed as YAML scalars so numbers and booleans coerce;
    variables whose first segment is not a config field are ignored (other
    FINRAG_* names belong to the registry clients).
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as err:
            raise ConfigError(f"config file {path} is not valid YAML: {err}")
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping at the top level")
        data = loaded

    known = set(ServiceConfig.model_fields)
    for name, raw in env.items():
        if not name.startswith("FINRAG_"):
            continue
        keys = name[len("FINRAG_"):].lower().split("__")
        if keys[0] not in known:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _assign(data, keys, value)

    try:
        return ServiceConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from err


# ---- runtime wiring ----

@dataclass
class Runtime:
    config: ServiceConfig
    store: HybridIndex
    gateway: LlmGateway
    deps: PipelineDeps
    conversations: ConversationStore
    registries: RegistryClients
    version: str = VERSION
    started_at: float = field(default_factory=lambda: dt.datetime.now(dt.timezone.utc).timestamp())

    def flush_store(self) -> None:
        self.store.flush()

    def close(self) -> None:
        self.conversations.close()


def _build_provider(settings: ProviderSettings) -> tuple[Provider, EmbeddingProvider, dict[str, str]]:
    if settings.kind == "offline":
        models = settings.models or {"default": "offline-rules", "judge": "offline-judge"}
        return OfflineRuleProvider(), HashEmbedder(dim=settings.embedding_dim), models
    chat = OpenAIChatProvider(settings.base_url, settings.api_key, timeout=settings.timeout)
    embedder = OpenAIEmbeddingProvider(
        settings.base_url,
        settings.embedding_model,
        settings.api_key,
        dim=settings.embedding_dim,
        timeout=settings.timeout,
    )
    return chat, embedder, dict(settings.models)


def build_runtime(
    config: ServiceConfig,
    *,
    provider: Provider | None = None,
    embedder: EmbeddingProvider | None = None,
    today=dt.date.today,
) -> Runtime:
    """Open the store, wire the gateway, and assemble pipeline dependencies.

    provider/embedder overrides exist for tests that inject scripted
    behavior behind a normal config.
    """
    os.makedirs(config.store_path, exist_ok=True)
    built_provider, built_embedder, models = _build_provider(config.provider)
    store = HybridIndex(path=config.store_path, dim=config.provider.embedding_dim)
    gateway = LlmGateway(
        provider or built_provider,
        embedder or built_embedder,
        models=models,
        temperature=config.provider.temperature,
        max_retries=config.provider.max_retries,
        limiter=ConcurrencyLimiter(config.provider.concurrency),
        audit=AuditLog(),
    )
    deps = PipelineDeps(
        store=store,
        gateway=gateway,
        config=config.pipeline.to_config(),
        today=today,
    )
    conv_dir = os.path.dirname(config.conversations_path)
    if conv_dir:
        os.makedirs(conv_dir, exist_ok=True)
    return Runtime(
        config=config,
        store=store,
        gateway=gateway,
        deps=deps,
        conversations=ConversationStore(config.conversations_path),
        registries=RegistryClients.from_env(),
    )

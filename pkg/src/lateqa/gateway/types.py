from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Literal, Union

from ..errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class ImagePart:
    """An image attachment. ``ref`` is its identity (used for mock lookup and
    fingerprints); the pixels come from ``png`` or, failing that, ``path``."""

    ref: str
    path: str | None = None
    png: bytes | None = field(default=None, repr=False, compare=False)

    def png_bytes(self) -> bytes:
        if self.png is not None:
            return self.png
        if self.path is None:
            raise InvalidInputError(f"image {self.ref!r} has neither bytes nor a path")
        return Path(self.path).read_bytes()


UserPart = Union[str, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_parts: tuple[UserPart, ...]
    response_format: Literal["free", "json"] = "free"
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 1024
    stage: str = ""  # label for logs and mock rules; not part of the fingerprint

    def __post_init__(self):
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise InvalidInputError("chat request needs at least one user part")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise InvalidInputError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.response_format not in ("free", "json"):
            raise InvalidInputError(f"unknown response_format {self.response_format!r}")

    @property
    def user_text(self) -> str:
        return "\n".join(p for p in self.user_parts if isinstance(p, str))

    @property
    def image_refs(self) -> list[str]:
        return [p.ref for p in self.user_parts if isinstance(p, ImagePart)]

    def fingerprint(self) -> str:
        """Stable hash of (system prompt, joined user text, image ids)."""
        blob = json.dumps([self.system_prompt, self.user_text, self.image_refs], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:24]

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "system_prompt": self.system_prompt,
            "user_text": self.user_text,
            "image_refs": self.image_refs,
            "response_format": self.response_format,
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_id: str
    latency_ms: int = 0
    truncated: bool = False
    refused: bool = False

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "model_id": self.model_id,
            "latency_ms": self.latency_ms,
            "truncated": self.truncated,
            "refused": self.refused,
        }


@dataclass(frozen=True)
class BackendConfig:
    kind: Literal["mock", "http"] = "mock"
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env: str | None = None
    timeout_ms: int = 120_000
    max_retries: int = 2
    retry_backoff_ms: int = 1000
    fixtures_dir: str | None = None
    scenario_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint_url and self.model_name):
            raise ConfigError("http backend requires endpoint_url and model_name")
        if self.kind == "mock" and not self.scenario_id:
            raise ConfigError("mock backend requires scenario_id")
        if self.max_retries < 0 or self.timeout_ms <= 0 or self.retry_backoff_ms < 0:
            raise ConfigError("timeout_ms must be > 0, max_retries and retry_backoff_ms >= 0")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        if "api_key" in d:
            raise ConfigError("API keys are read from the environment; set api_key_env instead")
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None and d.get("fixtures_dir"):
            d["fixtures_dir"] = str((Path(base_dir) / d["fixtures_dir"]).resolve())
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

from __future__ import annotations

import json
import threading
from pathlib import Path

from .http import HttpBackend
from .mock import MockBackend, payload_identity
from .types import BackendConfig, ChatRequest, ChatResponse


class Transcript:
    """Append-only log of every request/response pair. Appends are serialized."""

    def __init__(self, record_embeddings: bool = True):
        self.records: list[dict] = []
        self.record_embeddings = record_embeddings
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)

    def extend(self, records) -> None:
        with self._lock:
            self.records.extend(records)

    def dumps(self) -> str:
        with self._lock:
            return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def make_backend(config: BackendConfig):
    if config.kind == "mock":
        return MockBackend.from_config(config)
    return HttpBackend(config)


class Gateway:
    """One model endpoint (chat + multi-vector embedding) plus its transcript."""

    def __init__(self, config: BackendConfig, backend=None, transcript: Transcript | None = None):
        self.config = config
        self.backend = backend if backend is not None else make_backend(config)
        self.transcript = transcript

    @classmethod
    def from_backend(cls, backend, transcript: Transcript | None = None) -> "Gateway":
        """Wrap an existing backend object (anything with ``chat``/``embed_multivector``)."""
        return cls(BackendConfig(kind="mock", scenario_id="custom"), backend=backend, transcript=transcript)

    def bind(self, transcript: Transcript | None) -> "Gateway":
        """Same backend, different transcript."""
        return Gateway(self.config, self.backend, transcript)

    @property
    def model_id(self) -> str:
        return getattr(self.backend, "model_id", None) or self.config.model_name or "unknown"

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.backend.chat(request)
        if self.transcript is not None:
            self.transcript.append(
                {
                    "type": "chat",
                    "fingerprint": request.fingerprint(),
                    "request": request.to_dict(),
                    "response": response.to_dict(),
                }
            )
        return response

    def embed_multivector(self, payload):
        emb = self.backend.embed_multivector(payload)
        if self.transcript is not None:
            rec = {"type": "embed", "identity": payload_identity(payload), "shape": list(emb.data.shape)}
            if self.transcript.record_embeddings:
                rec["rows"] = emb.data.tolist()
            self.transcript.append(rec)
        return emb


def chat(config: BackendConfig, request: ChatRequest) -> ChatResponse:
    return Gateway(config).chat(request)


def embed_multivector(config: BackendConfig, payload):
    return Gateway(config).embed_multivector(payload)

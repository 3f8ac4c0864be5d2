"""Deterministic scripted backend.

A scenario is a JSON document (``{fixtures_dir}/{scenario_id}.json``)::

    {
      "scenario_id": "planted",
      "model_id": "mock-vlm",
      "responses": {"<fingerprint>": "<reply text>", ...},
      "rules": [
        {"stage": "filter", "contains": ["..."], "reply": "[1]"},
        {"stage": "answer", "contains": ["<question>"], "choose_option": "<option text>"}
      ],
      "embeddings": {
        "dim": 16, "tokens": 4,
        "fixtures": {"pageA": [[...], ...]},
        "hash_fallback": true
      }
    }

Chat lookup tries the exact fingerprint first, then the first matching rule.
``choose_option`` replies with the position of that option text in the
numbered option list of the prompt, so it answers by content regardless of
how the options were shuffled.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FixtureMissingError
from ..retrieval.embedding import MultiVectorEmbedding
from .types import BackendConfig, ChatRequest, ChatResponse, ImagePart

_OPTION_LINE = re.compile(r"^\s*(\d+)\.\s?(.*?)\s*$", re.MULTILINE)


def hash_embedding(identity: str, tokens: int, dim: int) -> MultiVectorEmbedding:
    """L2-normalized rows derived from SHAKE-256 of ``identity``."""
    raw = hashlib.shake_256(identity.encode("utf-8")).digest(tokens * dim * 8)
    u = np.frombuffer(raw, dtype="<u8").astype(np.float64) / 2.0**64
    rows = (2.0 * u - 1.0).reshape(tokens, dim)
    return MultiVectorEmbedding.normalize_rows(rows)


def payload_identity(payload) -> str:
    if isinstance(payload, ImagePart):
        return payload.ref
    return str(payload)


class MockBackend:
    def __init__(self, scenario: dict):
        self.scenario = scenario
        self.scenario_id = scenario.get("scenario_id", "inline")
        self.model_id = scenario.get("model_id", "mock")
        self._responses = dict(scenario.get("responses", {}))
        self._rules = list(scenario.get("rules", []))
        emb = scenario.get("embeddings", {})
        self._emb_fixtures = emb.get("fixtures", {})
        self._emb_dim = int(emb.get("dim", 128))
        self._emb_tokens = int(emb.get("tokens", 16))
        self._hash_fallback = bool(emb.get("hash_fallback", False))

    @classmethod
    def from_config(cls, config: BackendConfig) -> "MockBackend":
        base = Path(config.fixtures_dir or ".")
        path = base / f"{config.scenario_id}.json"
        if not path.exists():
            raise FixtureMissingError(f"mock scenario file not found: {path}")
        scenario = json.loads(path.read_text(encoding="utf-8"))
        scenario.setdefault("scenario_id", config.scenario_id)
        return cls(scenario)

    @classmethod
    def from_transcript(cls, records: Iterable[dict] | str | Path, scenario_id: str = "replay") -> "MockBackend":
        """Build a scenario that answers every request recorded in a transcript."""
        if isinstance(records, (str, Path)):
            lines = Path(records).read_text(encoding="utf-8").splitlines()
            records = [json.loads(line) for line in lines if line.strip()]
        responses, fixtures = {}, {}
        model_id = "mock"
        for rec in records:
            if rec["type"] == "chat":
                responses[rec["fingerprint"]] = rec["response"]["text"]
                model_id = rec["response"]["model_id"]
            elif rec["type"] == "embed":
                fixtures[rec["identity"]] = rec["rows"]
        return cls(
            {
                "scenario_id": scenario_id,
                "model_id": model_id,
                "responses": responses,
                "embeddings": {"fixtures": fixtures, "hash_fallback": False},
            }
        )

    def _rule_matches(self, rule: dict, request: ChatRequest) -> bool:
        if "stage" in rule and rule["stage"] != request.stage:
            return False
        haystack = request.system_prompt + "\n" + request.user_text
        if not all(s in haystack for s in rule.get("contains", [])):
            return False
        refs = set(request.image_refs)
        return all(r in refs for r in rule.get("image_refs", []))

    def _choose_option(self, rule: dict, request: ChatRequest) -> str:
        target = rule["choose_option"].strip()
        for m in _OPTION_LINE.finditer(request.user_text):
            if m.group(2).strip() == target:
                reply = {"think": rule.get("think", "scripted"), "answer": int(m.group(1))}
                return json.dumps(reply, ensure_ascii=False)
        raise FixtureMissingError(
            f"scenario {self.scenario_id!r}: option {target!r} not found in the {request.stage or 'chat'} prompt"
        )

    def chat(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint()
        if fp in self._responses:
            return ChatResponse(self._responses[fp], self.model_id, 0)
        for rule in self._rules:
            if self._rule_matches(rule, request):
                if "choose_option" in rule:
                    text = self._choose_option(rule, request)
                else:
                    text = rule["reply"]
                return ChatResponse(text, self.model_id, 0)
        raise FixtureMissingError(
            f"scenario {self.scenario_id!r} has no reply for stage={request.stage!r} fingerprint={fp}"
        )

    def embed_multivector(self, payload) -> MultiVectorEmbedding:
        ident = payload_identity(payload)
        if ident in self._emb_fixtures:
            rows = np.asarray(self._emb_fixtures[ident], dtype=np.float64)
            unit = bool(np.all(np.abs(np.linalg.norm(rows, axis=1) - 1.0) <= 1e-6))
            return MultiVectorEmbedding(rows, normalized=unit)
        if self._hash_fallback:
            kind = "image" if isinstance(payload, ImagePart) else "text"
            return hash_embedding(f"{kind}:{ident}", self._emb_tokens, self._emb_dim)
        raise FixtureMissingError(f"scenario {self.scenario_id!r} has no embedding fixture {ident!r}")

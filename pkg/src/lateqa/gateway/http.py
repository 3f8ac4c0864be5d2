"""OpenAI-compatible HTTP backend.

Chat goes to ``{endpoint_url}/chat/completions``. Multi-vector embeddings go to
``{endpoint_url}/embeddings`` with ``{"model", "input", "input_type"}`` and
must come back as ``{"data": [{"embedding": [[...], ...]}]}`` (one row per
token), which is what ColPali-style embedding servers return.
"""

from __future__ import annotations

import base64
import logging
import os
import time
from typing import Callable

import httpx

from ..errors import BackendUnavailableError, ConfigError, InvalidInputError, RequestError
from ..retrieval.embedding import MultiVectorEmbedding
from .types import BackendConfig, ChatRequest, ChatResponse, ImagePart

logger = logging.getLogger(__name__)

BODY_EXCERPT_CHARS = 500


def data_uri(image: ImagePart) -> str:
    return "data:image/png;base64," + base64.b64encode(image.png_bytes()).decode("ascii")


def build_chat_payload(config: BackendConfig, request: ChatRequest) -> dict:
    content = []
    for part in request.user_parts:
        if isinstance(part, ImagePart):
            content.append({"type": "image_url", "image_url": {"url": data_uri(part)}})
        else:
            content.append({"type": "text", "text": part})
    body = {
        "model": config.model_name,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": content},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.response_format == "json":
        body["response_format"] = {"type": "json_object"}
    if request.seed is not None:
        body["seed"] = request.seed
    return body


def backoff_schedule(config: BackendConfig) -> list[float]:
    """Seconds slept before each retry: base, 2*base, 4*base, ..."""
    return [config.retry_backoff_ms * (2**i) / 1000.0 for i in range(config.max_retries)]


class HttpBackend:
    def __init__(
        self,
        config: BackendConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.model_id = config.model_name
        self._client = client or httpx.Client(timeout=config.timeout_ms / 1000.0)
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if not key:
                raise ConfigError(f"environment variable {self.config.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        url = self.config.endpoint_url.rstrip("/") + path
        headers = self._headers()
        delays = backoff_schedule(self.config)
        last = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(delays[attempt - 1])
            try:
                resp = self._client.post(url, json=body, headers=headers, timeout=self.config.timeout_ms / 1000.0)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}: {resp.text[:BODY_EXCERPT_CHARS]}"
                elif resp.status_code >= 400:
                    excerpt = resp.text[:BODY_EXCERPT_CHARS]
                    raise RequestError(f"HTTP {resp.status_code} from {url}: {excerpt}", resp.status_code, excerpt)
                else:
                    return resp.json()
            logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, self.config.max_retries + 1, url, last)
        raise BackendUnavailableError(f"{url} unavailable after {self.config.max_retries + 1} attempts ({last})")

    def chat(self, request: ChatRequest) -> ChatResponse:
        t0 = time.perf_counter()
        data = self._post("/chat/completions", build_chat_payload(self.config, request))
        latency = int((time.perf_counter() - t0) * 1000)
        try:
            choice = data["choices"][0]
            text = choice["message"].get("content")
        except (KeyError, IndexError, TypeError) as exc:
            raise RequestError(f"malformed chat completion response: {str(data)[:BODY_EXCERPT_CHARS]}") from exc
        refused = text is None or bool(choice["message"].get("refusal"))
        return ChatResponse(
            text=text or "",
            model_id=data.get("model", self.model_id),
            latency_ms=latency,
            truncated=choice.get("finish_reason") == "length",
            refused=refused,
        )

    def embed_multivector(self, payload) -> MultiVectorEmbedding:
        if isinstance(payload, ImagePart):
            body = {"model": self.config.model_name, "input": data_uri(payload), "input_type": "image"}
        else:
            body = {"model": self.config.model_name, "input": str(payload), "input_type": "text"}
        data = self._post("/embeddings", body)
        try:
            rows = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise RequestError(f"malformed embedding response: {str(data)[:BODY_EXCERPT_CHARS]}") from exc
        try:
            return MultiVectorEmbedding(rows)
        except InvalidInputError as exc:
            raise RequestError(f"backend returned an invalid multi-vector embedding: {exc}") from exc

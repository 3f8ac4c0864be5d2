"""Model access: chat/vision completions and multi-vector embeddings."""

from .core import Gateway, Transcript, chat, embed_multivector, make_backend
from .http import HttpBackend, backoff_schedule, build_chat_payload
from .mock import MockBackend, hash_embedding
from .types import BackendConfig, ChatRequest, ChatResponse, ImagePart

__all__ = [
    "BackendConfig",
    "ChatRequest",
    "ChatResponse",
    "Gateway",
    "HttpBackend",
    "ImagePart",
    "MockBackend",
    "Transcript",
    "backoff_schedule",
    "build_chat_payload",
    "chat",
    "embed_multivector",
    "hash_embedding",
    "make_backend",
]

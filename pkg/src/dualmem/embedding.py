"""Text embedders.

``HashEmbedder`` is a deterministic feature-hashing embedder: every token is
hashed with BLAKE2b into a signed bucket, so texts sharing tokens have
positive cosine similarity. It needs no model weights and gives identical
vectors on every platform. ``RemoteEmbedder`` calls an OpenAI-compatible
``/embeddings`` endpoint and prefix-truncates to the store dimension.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
from typing import Protocol, Sequence

import httpx

from .indexes import tokenize
from .model import DEFAULT_EMBEDDING_DIM, Embedding, truncate_embedding

logger = logging.getLogger(__name__)


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> Embedding: ...


class HashEmbedder:
    def __init__(self, dim: int = DEFAULT_EMBEDDING_DIM):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cache: dict[str, Embedding] = {}
        self._lock = threading.Lock()

    def _features(self, text: str) -> list[str]:
        tokens = tokenize(text)
        if tokens:
            return tokens
        stripped = text.strip()
        return [stripped] if stripped else []

    def embed(self, text: str) -> Embedding:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        acc = [0.0] * self.dim
        for feature in self._features(text):
            digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            acc[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = math.sqrt(math.fsum(x * x for x in acc))
        vec = tuple(x / norm for x in acc) if norm > 0.0 else tuple(acc)
        with self._lock:
            self._cache[text] = vec
        return vec


class RemoteEmbedder:
    """OpenAI-compatible embedding endpoint with prefix truncation to ``dim``."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int = DEFAULT_EMBEDDING_DIM,
        api_key: str | None = None,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 60.0,
    ):
        self.dim = dim
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                    transport=transport, timeout=timeout)
        self._cache: dict[str, Embedding] = {}

    @classmethod
    def from_env(cls, dim: int = DEFAULT_EMBEDDING_DIM) -> "RemoteEmbedder":
        return cls(
            base_url=os.environ["DUALMEM_EMBED_URL"],
            model=os.environ.get("DUALMEM_EMBED_MODEL", "text-embedding"),
            dim=dim,
            api_key=os.environ.get("DUALMEM_EMBED_KEY"),
        )

    def embed_many(self, texts: Sequence[str]) -> list[Embedding]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            resp = self._client.post("/embeddings", json={"model": self.model, "input": missing})
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            for text, item in zip(missing, data):
                self._cache[text] = truncate_embedding(item["embedding"], self.dim)
        return [self._cache[t] for t in texts]

    def embed(self, text: str) -> Embedding:
        return self.embed_many([text])[0]

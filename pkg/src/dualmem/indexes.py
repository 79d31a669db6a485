"""System-1 retrieval primitives: a BM25 inverted index and an exact cosine index.

Both are partitioned by item kind. Ranking is fully deterministic: equal
scores are ordered by ascending node id.

Tokenization rule (shared by indexing and querying): lowercase with
``str.lower``, then take maximal runs of characters whose Unicode general
category is a letter (L*), mark (M*) or number (N*). Everything else,
including underscore and punctuation, separates tokens. No stemming and no
stop-word removal.
"""

from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .model import Embedding, NodeId

LEXICAL_KINDS = ("episode", "entity", "edge")
VECTOR_KINDS = ("episode", "entity_summary", "entity_name", "edge")

SCORE_DIGITS = 12

_ASCII_TOKEN = re.compile(r"[a-z0-9]+")


@lru_cache(maxsize=65536)
def _is_token_char(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "LMN"


def tokenize(text: str) -> list[str]:
    lowered = text.lower()
    if lowered.isascii():
        return _ASCII_TOKEN.findall(lowered)
    tokens: list[str] = []
    current: list[str] = []
    for ch in lowered:
        if _is_token_char(ch):
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


class BM25Index:
    """Okapi BM25 over one document collection.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which stays positive for every
    term, so any document sharing a query term scores above zero. Repeated query
    terms contribute once per occurrence.
    """

    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self._docs: dict[NodeId, Counter] = {}
        self._lengths: dict[NodeId, int] = {}
        self._postings: dict[str, dict[NodeId, int]] = {}
        self._total_length = 0

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: NodeId) -> bool:
        return doc_id in self._docs

    @property
    def avgdl(self) -> float:
        return self._total_length / len(self._docs) if self._docs else 0.0

    def df(self, term: str) -> int:
        return len(self._postings.get(term, ()))

    def postings(self, term: str) -> list[tuple[NodeId, int]]:
        return sorted(self._postings.get(term, {}).items())

    def add(self, doc_id: NodeId, tokens: Sequence[str]) -> None:
        if doc_id in self._docs:
            self.remove(doc_id)
        counts = Counter(tokens)
        self._docs[doc_id] = counts
        self._lengths[doc_id] = len(tokens)
        self._total_length += len(tokens)
        for term, tf in counts.items():
            self._postings.setdefault(term, {})[doc_id] = tf

    def remove(self, doc_id: NodeId) -> None:
        counts = self._docs.pop(doc_id, None)
        if counts is None:
            return
        self._total_length -= self._lengths.pop(doc_id)
        for term in counts:
            posting = self._postings[term]
            del posting[doc_id]
            if not posting:
                del self._postings[term]

    def idf(self, term: str) -> float:
        n = len(self._docs)
        df = self.df(term)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def search(self, query_tokens: Sequence[str], limit: int) -> list[tuple[NodeId, float]]:
        if limit <= 0 or not self._docs:
            return []
        avgdl = self.avgdl
        scores: dict[NodeId, float] = {}
        for term, qtf in sorted(Counter(query_tokens).items()):
            posting = self._postings.get(term)
            if not posting:
                continue
            idf = self.idf(term)
            for doc_id, tf in posting.items():
                norm = self.k1 * (1.0 - self.b + self.b * self._lengths[doc_id] / avgdl)
                scores[doc_id] = scores.get(doc_id, 0.0) + qtf * idf * tf * (self.k1 + 1.0) / (tf + norm)
        ranked = sorted((item for item in scores.items() if item[1] > 0.0),
                        key=lambda item: (-item[1], item[0]))
        return ranked[:limit]


class LexicalIndex:
    """BM25 partitions for episode content, entity name+summary and edge facts."""

    def __init__(self, k1: float = 1.2, b: float = 0.75, name_boost: int = 2):
        self.name_boost = name_boost
        self.parts = {kind: BM25Index(k1, b) for kind in LEXICAL_KINDS}

    def entity_tokens(self, name: str, summary: str) -> list[str]:
        return tokenize(name) * self.name_boost + tokenize(summary)

    def add(self, kind: str, doc_id: NodeId, text: str) -> None:
        self.parts[kind].add(doc_id, tokenize(text))

    def add_entity(self, doc_id: NodeId, name: str, summary: str) -> None:
        self.parts["entity"].add(doc_id, self.entity_tokens(name, summary))

    def remove(self, kind: str, doc_id: NodeId) -> None:
        self.parts[kind].remove(doc_id)

    def search(self, query: str, kind: str, limit: int) -> list[tuple[NodeId, float]]:
        tokens = tokenize(query)
        if not tokens:
            return []
        return self.parts[kind].search(tokens, limit)


class FlatVectorIndex:
    """Exact cosine search by full scan over unit-normalized rows."""

    def __init__(self, dim: int):
        self.dim = dim
        self._ids: list[NodeId] = []
        self._rows: list[np.ndarray] = []
        self._pos: dict[NodeId, int] = {}
        self._matrix: np.ndarray | None = None
        self._id_rank: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._ids)

    def _check_dim(self, vec: Sequence[float]) -> None:
        if len(vec) != self.dim:
            raise ValueError(f"vector dimension {len(vec)} does not match index dimension {self.dim}")

    @staticmethod
    def _unit(vec: Sequence[float]) -> np.ndarray:
        arr = np.asarray(vec, dtype=np.float64)
        norm = math.sqrt(math.fsum(float(x) * float(x) for x in arr))
        return arr / norm if norm > 0.0 else arr

    def add(self, doc_id: NodeId, vec: Embedding) -> None:
        self._check_dim(vec)
        row = self._unit(vec)
        if doc_id in self._pos:
            self._rows[self._pos[doc_id]] = row
        else:
            self._pos[doc_id] = len(self._ids)
            self._ids.append(doc_id)
            self._rows.append(row)
        self._matrix = None

    def remove(self, doc_id: NodeId) -> None:
        pos = self._pos.pop(doc_id, None)
        if pos is None:
            return
        del self._ids[pos]
        del self._rows[pos]
        self._pos = {d: i for i, d in enumerate(self._ids)}
        self._matrix = None

    def _prepare(self) -> None:
        if self._matrix is None:
            matrix = (np.vstack(self._rows) if self._rows
                      else np.zeros((0, self.dim), dtype=np.float64))
            order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
            rank = np.empty(len(order), dtype=np.int64)
            rank[order] = np.arange(len(order))
            # concurrent readers test _matrix, so publish it last
            self._id_rank = rank
            self._matrix = matrix

    def search(self, query: Sequence[float], limit: int) -> list[tuple[NodeId, float]]:
        self._check_dim(query)
        if limit <= 0 or not self._ids:
            return []
        self._prepare()
        matrix, id_rank = self._matrix, self._id_rank
        q = self._unit(query)
        # rounding makes mathematically equal cosines tie on every BLAS build,
        # so the id tie-break decides them
        scores = np.round(matrix @ q, SCORE_DIGITS)
        order = np.lexsort((id_rank, -scores))[:limit]
        return [(self._ids[i], float(scores[i])) for i in order]

    def vectors(self) -> Iterable[tuple[NodeId, np.ndarray]]:
        return zip(self._ids, self._rows)


class VectorIndex:
    """Cosine partitions for episode, entity summary/name and edge fact embeddings."""

    def __init__(self, dim: int):
        self.dim = dim
        self.parts = {kind: FlatVectorIndex(dim) for kind in VECTOR_KINDS}

    def add(self, kind: str, doc_id: NodeId, vec: Embedding) -> None:
        self.parts[kind].add(doc_id, vec)

    def remove(self, kind: str, doc_id: NodeId) -> None:
        self.parts[kind].remove(doc_id)

    def search(self, query_vec: Sequence[float], kind: str, limit: int) -> list[tuple[NodeId, float]]:
        return self.parts[kind].search(query_vec, limit)

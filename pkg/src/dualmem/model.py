"""Persistent domain types shared by every part of the memory engine.

Records are frozen dataclasses: episodes, entities (layer 0), relation edges,
categories (layer >= 1) and the two link types. Embeddings are plain tuples of
floats so records stay hashable and serialize losslessly to JSON.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Union

NodeId = str
Embedding = tuple[float, ...]

DEFAULT_EMBEDDING_DIM = 128
MAX_TAGS = 5
MAX_TAG_WORDS = 3


class ConfigurationError(ValueError):
    """Store-wide settings are inconsistent (e.g. mixed embedding dimensions)."""


class InvariantError(ValueError):
    """A record or mutation violates a domain invariant."""

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invariant violation")


# -- timestamps --------------------------------------------------------------


def to_timestamp(value: Union[str, datetime, int, float]) -> datetime:
    """Coerce to an aware UTC datetime truncated to whole seconds.

    Accepts RFC 3339 strings (``Z`` or offset), naive datetimes (taken as UTC),
    aware datetimes and POSIX seconds.
    """
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, (int, float)):
        dt = datetime.fromtimestamp(value, tz=timezone.utc)
    elif isinstance(value, str):
        text = value.strip()
        if text.endswith("Z") or text.endswith("z"):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise ValueError(f"not an RFC 3339 timestamp: {value!r}") from exc
    else:
        raise TypeError(f"cannot convert {type(value).__name__} to timestamp")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(dt: datetime) -> str:
    return to_timestamp(dt).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_date(dt: datetime) -> str:
    return to_timestamp(dt).strftime("%Y-%m-%d")


# -- embeddings ----------------------------------------------------------------


def as_embedding(values: Iterable[float]) -> Embedding:
    return tuple(float(x) for x in values)


def embedding_norm(v: Embedding) -> float:
    return math.sqrt(math.fsum(x * x for x in v))


def embedding_problems(v: Embedding, dim: int, label: str = "embedding") -> list[str]:
    problems = []
    if len(v) != dim:
        problems.append(f"{label} has dimension {len(v)}, expected {dim}")
    if not all(math.isfinite(x) for x in v):
        problems.append(f"{label} has non-finite components")
    return problems


def truncate_embedding(v: Iterable[float], target_dim: int) -> Embedding:
    """Keep the first ``target_dim`` components and rescale to unit length.

    A zero prefix stays zero. A prefix that is already unit length (to within
    1e-12) is returned unchanged, which makes the operation idempotent
    bit-for-bit.
    """
    v = as_embedding(v)
    if target_dim <= 0:
        raise ValueError("target_dim must be positive")
    if target_dim > len(v):
        raise ValueError(f"target_dim {target_dim} exceeds vector dimension {len(v)}")
    prefix = v[:target_dim]
    norm = embedding_norm(prefix)
    if norm == 0.0 or abs(norm - 1.0) <= 1e-12:
        return prefix
    return tuple(x / norm for x in prefix)


def cosine(a: Embedding, b: Embedding) -> float:
    na, nb = embedding_norm(a), embedding_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return math.fsum(x * y for x, y in zip(a, b)) / (na * nb)


# -- tags and names --------------------------------------------------------------

_AND_RE = re.compile(r"(?<![^\W_])and(?![^\W_])", re.IGNORECASE)


def has_connector_and(name: str) -> bool:
    """True when ``name`` contains the standalone word "and" (any case)."""
    return bool(_AND_RE.search(name))


def sanitize_category_name(name: str) -> str:
    """Replace the standalone connector "and" with an ampersand."""
    return re.sub(r"\s+", " ", _AND_RE.sub("&", name)).strip()


def tag_problems(tags: Iterable[str]) -> list[str]:
    tags = list(tags)
    problems = []
    if len(tags) > MAX_TAGS:
        problems.append(f"{len(tags)} tags, at most {MAX_TAGS} allowed")
    for t in tags:
        if not t.strip():
            problems.append("empty tag")
        elif len(t.split()) > MAX_TAG_WORDS:
            problems.append(f"tag {t!r} longer than {MAX_TAG_WORDS} words")
    return problems


def clamp_tags(tags: Iterable[str]) -> tuple[tuple[str, ...], list[str]]:
    """Enforce the 5-descriptor / 3-word limits; returns (tags, warnings)."""
    out: list[str] = []
    warnings: list[str] = []
    seen: set[str] = set()
    for raw in tags:
        words = str(raw).split()
        if not words:
            continue
        if len(words) > MAX_TAG_WORDS:
            warnings.append(f"tag {raw!r} truncated to {MAX_TAG_WORDS} words")
            words = words[:MAX_TAG_WORDS]
        tag = " ".join(words)
        key = tag.casefold()
        if key in seen:
            continue
        seen.add(key)
        out.append(tag)
    if len(out) > MAX_TAGS:
        warnings.append(f"{len(out)} tags truncated to {MAX_TAGS}")
        out = out[:MAX_TAGS]
    return tuple(out), warnings


# -- records -------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeRecord:
    id: NodeId
    content: str
    valid_at: datetime
    episode_embedding: Embedding
    source_session: str = ""

    def problems(self, dim: int) -> list[str]:
        out = []
        if not self.content.strip():
            out.append("episode content is empty")
        out += embedding_problems(self.episode_embedding, dim, "episode_embedding")
        return out


@dataclass(frozen=True)
class EntityRecord:
    id: NodeId
    name: str
    summary: str
    tag: tuple[str, ...] = ()
    episode_idx: frozenset[NodeId] = frozenset()
    name_embedding: Embedding = ()
    summary_embedding: Embedding = ()
    layer: int = 0

    def problems(self, dim: int) -> list[str]:
        out = []
        if not self.name.strip():
            out.append("entity name is empty")
        if self.layer != 0:
            out.append(f"entity layer must be 0, got {self.layer}")
        out += tag_problems(self.tag)
        out += embedding_problems(self.name_embedding, dim, "name_embedding")
        out += embedding_problems(self.summary_embedding, dim, "summary_embedding")
        return out


@dataclass(frozen=True)
class CategoryRecord:
    id: NodeId
    name: str
    summary: str
    tag: tuple[str, ...] = ()
    episode_idx: frozenset[NodeId] = frozenset()
    name_embedding: Embedding = ()
    summary_embedding: Embedding = ()
    layer: int = 1
    # set for standalone categories that are exempt from the compression ratio
    promoted: bool = False

    def problems(self, dim: int) -> list[str]:
        out = []
        if not self.name.strip():
            out.append("category name is empty")
        if self.layer < 1:
            out.append(f"category layer must be >= 1, got {self.layer}")
        if has_connector_and(self.name):
            out.append(f"category name {self.name!r} contains the connector 'and'")
        out += tag_problems(self.tag)
        out += embedding_problems(self.name_embedding, dim, "name_embedding")
        out += embedding_problems(self.summary_embedding, dim, "summary_embedding")
        return out


@dataclass(frozen=True)
class RelationEdge:
    id: NodeId
    source: NodeId
    target: NodeId
    fact: str
    fact_embedding: Embedding
    valid_at: datetime
    invalid_at: datetime | None = None
    reflexive: bool = False

    def problems(self, dim: int) -> list[str]:
        out = []
        if not self.fact.strip():
            out.append("edge fact is empty")
        if self.source == self.target and not self.reflexive:
            out.append("self-edge without the reflexive flag")
        if self.invalid_at is not None and self.invalid_at < self.valid_at:
            out.append("invalid_at precedes valid_at")
        out += embedding_problems(self.fact_embedding, dim, "fact_embedding")
        return out

    def other_end(self, entity: NodeId) -> NodeId:
        return self.target if self.source == entity else self.source


@dataclass(frozen=True, order=True)
class EpisodicEdge:
    entity: NodeId
    episode: NodeId


@dataclass(frozen=True, order=True)
class CategoryEdge:
    parent: NodeId
    child: NodeId


Record = Union[EpisodeRecord, EntityRecord, CategoryRecord, RelationEdge]


def merge_entity_attributes(existing: EntityRecord, incoming: EntityRecord) -> EntityRecord:
    """Fold a duplicate mention into the stored entity.

    Episode references are unioned, tags are merged incoming-first (newest
    descriptors win the 5-slot budget), the incoming summary replaces the old
    one and the existing name stays canonical. Embeddings are pure functions of
    their text, so the canonical name keeps its embedding and the summary
    embedding travels with the incoming summary.
    """
    dims = {len(existing.name_embedding), len(existing.summary_embedding),
            len(incoming.name_embedding), len(incoming.summary_embedding)}
    if len(dims) != 1:
        raise ConfigurationError(f"embedding dimension mismatch while merging: {sorted(dims)}")
    tags, _ = clamp_tags(list(incoming.tag) + list(existing.tag))
    summary = incoming.summary if incoming.summary.strip() else existing.summary
    summary_embedding = (incoming.summary_embedding if incoming.summary.strip()
                         else existing.summary_embedding)
    return replace(
        existing,
        tag=tags,
        summary=summary,
        summary_embedding=summary_embedding,
        episode_idx=existing.episode_idx | incoming.episode_idx,
    )


# -- line-delimited JSON form ---------------------------------------------------


def record_to_json(record: Any) -> dict[str, Any]:
    """Canonical JSON object for a record (field names as declared)."""
    if isinstance(record, EpisodeRecord):
        return {
            "id": record.id,
            "content": record.content,
            "valid_at": format_timestamp(record.valid_at),
            "episode_embedding": list(record.episode_embedding),
            "source_session": record.source_session,
        }
    if isinstance(record, (EntityRecord, CategoryRecord)):
        out = {
            "id": record.id,
            "name": record.name,
            "summary": record.summary,
            "tag": list(record.tag),
            "episode_idx": sorted(record.episode_idx),
            "name_embedding": list(record.name_embedding),
            "summary_embedding": list(record.summary_embedding),
            "layer": record.layer,
        }
        if isinstance(record, CategoryRecord):
            out["promoted"] = record.promoted
        return out
    if isinstance(record, RelationEdge):
        return {
            "id": record.id,
            "source": record.source,
            "target": record.target,
            "fact": record.fact,
            "fact_embedding": list(record.fact_embedding),
            "valid_at": format_timestamp(record.valid_at),
            "invalid_at": None if record.invalid_at is None else format_timestamp(record.invalid_at),
            "reflexive": record.reflexive,
        }
    if isinstance(record, EpisodicEdge):
        return {"entity": record.entity, "episode": record.episode}
    if isinstance(record, CategoryEdge):
        return {"parent": record.parent, "child": record.child}
    raise TypeError(f"not a memory record: {type(record).__name__}")


def episode_from_json(d: dict[str, Any]) -> EpisodeRecord:
    return EpisodeRecord(
        id=d["id"],
        content=d["content"],
        valid_at=to_timestamp(d["valid_at"]),
        episode_embedding=as_embedding(d["episode_embedding"]),
        source_session=d.get("source_session", ""),
    )


def entity_from_json(d: dict[str, Any]) -> EntityRecord:
    return EntityRecord(
        id=d["id"],
        name=d["name"],
        summary=d["summary"],
        tag=tuple(d.get("tag", ())),
        episode_idx=frozenset(d.get("episode_idx", ())),
        name_embedding=as_embedding(d["name_embedding"]),
        summary_embedding=as_embedding(d["summary_embedding"]),
        layer=int(d.get("layer", 0)),
    )


def category_from_json(d: dict[str, Any]) -> CategoryRecord:
    return CategoryRecord(
        id=d["id"],
        name=d["name"],
        summary=d["summary"],
        tag=tuple(d.get("tag", ())),
        episode_idx=frozenset(d.get("episode_idx", ())),
        name_embedding=as_embedding(d["name_embedding"]),
        summary_embedding=as_embedding(d["summary_embedding"]),
        layer=int(d["layer"]),
        promoted=bool(d.get("promoted", False)),
    )


def edge_from_json(d: dict[str, Any]) -> RelationEdge:
    invalid = d.get("invalid_at")
    return RelationEdge(
        id=d["id"],
        source=d["source"],
        target=d["target"],
        fact=d["fact"],
        fact_embedding=as_embedding(d["fact_embedding"]),
        valid_at=to_timestamp(d["valid_at"]),
        invalid_at=None if invalid is None else to_timestamp(invalid),
        reflexive=bool(d.get("reflexive", False)),
    )


@dataclass
class AuditReport:
    """Result of a full-store consistency scan; empty lists mean healthy."""

    referential: list[str] = field(default_factory=list)
    episodic_lockstep: list[str] = field(default_factory=list)
    layer_difference: list[str] = field(default_factory=list)
    dimension: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.referential or self.episodic_lockstep
                    or self.layer_difference or self.dimension)

    def counts(self) -> dict[str, int]:
        return {
            "referential": len(self.referential),
            "episodic_lockstep": len(self.episodic_lockstep),
            "layer_difference": len(self.layer_difference),
            "dimension": len(self.dimension),
        }

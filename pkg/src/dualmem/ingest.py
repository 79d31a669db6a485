"""Incremental base-graph ingestion.

Each episode is processed in two phases. The staging phase makes every
oracle call (entity names, reflection, dedup, attributes, edges, edge dedup)
without touching the store. The commit phase then writes the episode, its
entities and its edges under the store's writer lock. An oracle outage during
staging therefore leaves no partial episode behind.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .model import (
    EntityRecord,
    EpisodeRecord,
    NodeId,
    RelationEdge,
    cosine,
    merge_entity_attributes,
    to_timestamp,
)
from .oracle.base import ConceptOracle, EdgeDraft, OracleUnavailable
from .retrieval import rrf_fuse
from .store import MemoryStore

logger = logging.getLogger(__name__)

LOCOMO_DATE_FORMAT = "%I:%M %p on %d %B, %Y"


class CorpusError(ValueError):
    """Malformed corpus input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str
    timestamp: datetime
    session: str = ""

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Message":
        missing = [k for k in ("speaker", "text", "timestamp") if k not in d]
        if missing:
            raise ValueError(f"missing fields {missing}")
        if not isinstance(d["text"], str) or not isinstance(d["speaker"], str):
            raise ValueError("speaker and text must be strings")
        return cls(d["speaker"], d["text"], to_timestamp(d["timestamp"]),
                   str(d.get("session_id", d.get("session", ""))))


@dataclass
class IngestReport:
    episodes_created: int = 0
    entities_created: int = 0
    entities_merged: int = 0
    edges_created: int = 0
    edges_merged: int = 0
    oracle_calls: int = 0
    warnings: list[str] = field(default_factory=list)
    episodes_seen: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "episodes_seen": self.episodes_seen,
            "episodes_created": self.episodes_created,
            "entities_created": self.entities_created,
            "entities_merged": self.entities_merged,
            "edges_created": self.edges_created,
            "edges_merged": self.edges_merged,
            "oracle_calls": self.oracle_calls,
            "warnings": list(self.warnings),
        }


class IngestAborted(RuntimeError):
    """The oracle went away; episodes before ``report.episodes_seen`` are committed."""

    def __init__(self, report: IngestReport, cause: Exception):
        self.report = report
        self.cause = cause
        super().__init__(f"ingestion aborted after {report.episodes_seen} episodes: {cause}")


# -- chunking ---------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeDraft:
    text: str
    timestamp: datetime
    session: str


def _runs(messages: Sequence[Message]) -> Iterator[list[Message]]:
    run: list[Message] = []
    for m in messages:
        if run and m.session != run[-1].session:
            yield run
            run = []
        run.append(m)
    if run:
        yield run


def chunk_session(messages: Sequence[Message], policy: str = "turn") -> list[EpisodeDraft]:
    """Turn messages into episode drafts.

    ``turn``: one episode per message, text ``"speaker: text"``.
    ``exchange``: consecutive pairs of turns within a session share one episode,
    stamped with the first turn's time.
    """
    if policy not in ("turn", "exchange"):
        raise ValueError(f"unknown chunking policy {policy!r}")
    out: list[EpisodeDraft] = []
    for run in _runs(messages):
        step = 1 if policy == "turn" else 2
        for i in range(0, len(run), step):
            group = [m for m in run[i:i + step] if m.text.strip()]
            if not group:
                continue
            text = "\n".join(f"{m.speaker}: {m.text.strip()}" for m in group)
            out.append(EpisodeDraft(text, group[0].timestamp, group[0].session))
    return out


def episode_chunking(raw_session: Sequence[Message], policy: str = "turn") -> list[str]:
    return [d.text for d in chunk_session(raw_session, policy)]


def check_order(messages: Sequence[Message]) -> None:
    last: dict[str, datetime] = {}
    for i, m in enumerate(messages, start=1):
        prev = last.get(m.session)
        if prev is not None and m.timestamp < prev:
            raise CorpusError(f"timestamp goes backwards within session {m.session!r}", line=i)
        last[m.session] = m.timestamp


# -- corpus readers -----------------------------------------------------------------


def _locomo_time(text: str) -> datetime:
    return to_timestamp(datetime.strptime(text.strip(), LOCOMO_DATE_FORMAT))


def load_locomo(data: Any) -> list[Message]:
    """Flatten LoCoMo-style conversations into messages.

    Session dates carry minute resolution only, so turn ``j`` of a session is
    stamped ``session start + j seconds`` to keep turn order in the timeline.
    """
    samples = data if isinstance(data, list) else [data]
    out: list[Message] = []
    for s_idx, sample in enumerate(samples):
        conv = sample["conversation"]
        sample_id = str(sample.get("sample_id", s_idx))
        keys = [k for k in conv if k.startswith("session_") and k[len("session_"):].isdigit()]
        for key in sorted(keys, key=lambda k: int(k[len("session_"):])):
            start = _locomo_time(conv[f"{key}_date_time"])
            for j, turn in enumerate(conv[key]):
                out.append(Message(turn["speaker"], turn["text"], start + timedelta(seconds=j),
                                   f"{sample_id}:{key}"))
    return out


def read_corpus(path: str | Path) -> list[Message]:
    """Read line-JSON messages, or a LoCoMo-style JSON document."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            return load_locomo(json.loads(text))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusError(f"not a LoCoMo-style document: {exc}") from exc
    if stripped.startswith("{") and '"conversation"' in stripped[:4096]:
        try:
            doc = json.loads(text)
        except ValueError:
            doc = None
        if isinstance(doc, dict) and "conversation" in doc:
            return load_locomo(doc)
    messages = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            if not isinstance(d, dict):
                raise ValueError("expected a JSON object")
            messages.append(Message.from_json(d))
        except (ValueError, TypeError) as exc:
            raise CorpusError(str(exc), line=lineno) from exc
    return messages


# -- pipeline ---------------------------------------------------------------------


@dataclass
class _Staged:
    episode: EpisodeRecord
    episode_is_new: bool
    entities: dict[NodeId, EntityRecord]
    new_entities: set[NodeId]
    merged_mentions: int
    edges: list[RelationEdge]
    edges_merged: int


class Ingestor:
    def __init__(self, store: MemoryStore, oracle: ConceptOracle):
        self.store = store
        self.oracle = oracle
        self.config = store.config

    def ingest(self, messages: Iterable[Message]) -> IngestReport:
        messages = list(messages)
        check_order(messages)
        drafts = chunk_session(messages, self.config.chunking)
        report = IngestReport()
        calls_before = self.oracle.stats.total_calls
        warn_before = len(self.oracle.warnings)
        # a single batch writer at a time; readers are not blocked between episodes
        with self.store.write_lock:
            for draft in drafts:
                try:
                    staged = self._stage(draft, report)
                except OracleUnavailable as exc:
                    report.oracle_calls = self.oracle.stats.total_calls - calls_before
                    report.warnings.extend(self.oracle.warnings[warn_before:])
                    logger.error("oracle unavailable; stopping before episode %d", report.episodes_seen + 1)
                    raise IngestAborted(report, exc) from exc
                self._commit(staged, report)
                report.episodes_seen += 1
        report.oracle_calls = self.oracle.stats.total_calls - calls_before
        report.warnings = self.oracle.warnings[warn_before:] + report.warnings
        return report

    def _embed(self, text: str):
        return self.store.embedder.embed(text)

    def _candidates(self, name: str) -> list[EntityRecord]:
        budget = self.config.dedup_candidates
        lex = [i for i, _ in self.store.lexical.search(name, "entity", budget)]
        vec = [i for i, _ in self.store.vectors.search(self._embed(name), "entity_name", budget)]
        fused = rrf_fuse([lex, vec], self.config.rrf_c)
        return [self.store.entities[i] for i, _ in fused]

    def _stage(self, draft: EpisodeDraft, report: IngestReport) -> _Staged:
        store, oracle = self.store, self.oracle
        existing_ep = store.find_episode(draft.session, draft.timestamp, draft.text)
        if existing_ep is not None:
            episode, is_new = existing_ep, False
        else:
            episode = EpisodeRecord(store.new_id("ep"), draft.text, to_timestamp(draft.timestamp),
                                    self._embed(draft.text), draft.session)
            is_new = True
        recent = [e for e in store.recent_episodes(episode.valid_at, self.config.recent_window)
                  if e.id != episode.id]

        names = oracle.extract_entity_names(episode, recent)
        names += oracle.reflect_missing_names(episode, recent, names)

        # resolve each name to an existing entity, an entity staged earlier in
        # this episode, or a new one
        targets: list[tuple[str, NodeId | None]] = []
        staged_by_name: dict[str, NodeId] = {}
        pending_new: dict[NodeId, str] = {}
        merged_mentions = 0
        for name in names:
            key = name.casefold()
            if key in staged_by_name:
                targets.append((name, staged_by_name[key]))
                continue
            candidates = self._candidates(name)
            offered = {c.id for c in candidates}
            for new_id, new_name in pending_new.items():
                if new_id not in offered:
                    candidates.append(EntityRecord(new_id, new_name, "", (), frozenset(),
                                                   self._embed(new_name), self._embed(new_name)))
            verdict = oracle.resolve_duplicates(name, candidates)
            if verdict is None:
                verdict = store.new_id("en")
                pending_new[verdict] = name
            elif verdict in store.entities:
                merged_mentions += 1
            staged_by_name[key] = verdict
            targets.append((name, verdict))

        def attributes(item: tuple[str, NodeId]):
            return oracle.extract_entity_attributes(item[0], episode, recent)

        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            attrs = list(pool.map(attributes, targets))

        entities: dict[NodeId, EntityRecord] = {}
        for (name, ent_id), (summary, tags) in zip(targets, attrs):
            incoming = EntityRecord(
                id=ent_id,
                name=name,
                summary=summary,
                tag=tags,
                episode_idx=frozenset({episode.id}),
                name_embedding=self._embed(name),
                summary_embedding=self._embed(summary),
            )
            base = entities.get(ent_id) or store.entities.get(ent_id)
            entities[ent_id] = merge_entity_attributes(base, incoming) if base is not None else incoming
        ent_list = [entities[i] for i in sorted(entities)]

        drafts = oracle.extract_edges(episode, recent, ent_list)
        drafts += oracle.reflect_missing_edges(episode, recent, ent_list, drafts)
        edges: list[RelationEdge] = []
        edges_merged = 0
        for d in drafts:
            reflexive = d.source == d.target
            if reflexive and not self.config.allow_reflexive_edges:
                report.warnings.append(f"{episode.id}: self-edge {d.fact!r} dropped")
                continue
            fact_vec = self._embed(d.fact)
            similar = [c for c in self._edge_candidates(d, edges)
                       if cosine(c.fact_embedding, fact_vec) >= self.config.edge_dedup_threshold]
            if similar and oracle.resolve_edge_duplicate(d, similar) is not None:
                edges_merged += 1
                continue
            valid_at = d.valid_at or episode.valid_at
            invalid_at = d.invalid_at
            if invalid_at is not None and invalid_at < valid_at:
                report.warnings.append(f"{episode.id}: invalid_at before valid_at for {d.fact!r}; ignored")
                invalid_at = None
            edges.append(RelationEdge(store.new_id("ed"), d.source, d.target, d.fact.strip(),
                                      fact_vec, valid_at, invalid_at, reflexive))
        return _Staged(episode, is_new, entities, set(pending_new), merged_mentions, edges, edges_merged)

    def _edge_candidates(self, draft: EdgeDraft, staged: Sequence[RelationEdge]) -> list[RelationEdge]:
        pair = {draft.source, draft.target}
        found = [e for e in self.store.edges_between(draft.source, draft.target)]
        found += [e for e in staged if {e.source, e.target} == pair]
        return found

    def _commit(self, staged: _Staged, report: IngestReport) -> None:
        store = self.store
        with store.write_lock:
            if staged.episode_is_new:
                store.upsert_node(staged.episode)
                report.episodes_created += 1
            for ent_id in sorted(staged.entities):
                store.upsert_node(staged.entities[ent_id])
            for edge in staged.edges:
                store.upsert_edge(edge)
        report.entities_created += len(staged.new_entities)
        report.entities_merged += staged.merged_mentions
        report.edges_created += len(staged.edges)
        report.edges_merged += staged.edges_merged


def ingest(store: MemoryStore, oracle: ConceptOracle, messages: Iterable[Message]) -> IngestReport:
    return Ingestor(store, oracle).ingest(messages)

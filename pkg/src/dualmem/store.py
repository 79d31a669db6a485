"""Embedded property-graph store for the base graph and the category hierarchy.

The base graph (episodes, entities, relation edges, episodic edges) is
mutated in place under a single writer lock. The hierarchy lives in an
immutable ``HierarchyGeneration``; ``swap_hierarchy`` validates a complete
replacement and publishes it with one reference assignment, so a reader that
grabs ``store.hierarchy`` once sees either the whole old or the whole new
hierarchy.
"""

from __future__ import annotations

import bisect
import logging
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable, Sequence, Union

from .config import MemoryConfig
from .embedding import Embedder, HashEmbedder
from .indexes import LexicalIndex, VectorIndex
from .model import (
    AuditReport,
    CategoryEdge,
    CategoryRecord,
    EntityRecord,
    EpisodeRecord,
    EpisodicEdge,
    InvariantError,
    NodeId,
    RelationEdge,
    embedding_problems,
    to_timestamp,
)

logger = logging.getLogger(__name__)

ID_PREFIX = {
    EpisodeRecord: "ep",
    EntityRecord: "en",
    RelationEdge: "ed",
    CategoryRecord: "ca",
}


class NotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class HierarchyGeneration:
    """One complete, validated hierarchy. Never mutated after construction."""

    number: int
    categories: dict[NodeId, CategoryRecord] = field(default_factory=dict)
    edges: tuple[CategoryEdge, ...] = ()
    children: dict[NodeId, tuple[NodeId, ...]] = field(default_factory=dict)
    parents: dict[NodeId, tuple[NodeId, ...]] = field(default_factory=dict)
    layers: dict[int, tuple[NodeId, ...]] = field(default_factory=dict)

    @classmethod
    def build(cls, number: int, categories: Iterable[CategoryRecord],
              edges: Iterable[CategoryEdge]) -> "HierarchyGeneration":
        cats = {c.id: c for c in categories}
        edge_list = tuple(sorted(set(edges)))
        children: dict[NodeId, list[NodeId]] = {}
        parents: dict[NodeId, list[NodeId]] = {}
        for e in edge_list:
            children.setdefault(e.parent, []).append(e.child)
            parents.setdefault(e.child, []).append(e.parent)
        layers: dict[int, list[NodeId]] = {}
        for c in cats.values():
            layers.setdefault(c.layer, []).append(c.id)
        return cls(
            number=number,
            categories=cats,
            edges=edge_list,
            children={k: tuple(sorted(v)) for k, v in children.items()},
            parents={k: tuple(sorted(v)) for k, v in parents.items()},
            layers={k: tuple(sorted(v)) for k, v in sorted(layers.items())},
        )

    @property
    def empty(self) -> bool:
        return not self.categories

    @property
    def top_layer(self) -> int:
        return max(self.layers) if self.layers else 0

    def layer(self, i: int) -> list[CategoryRecord]:
        return [self.categories[c] for c in self.layers.get(i, ())]

    def children_of(self, node: NodeId) -> tuple[NodeId, ...]:
        return self.children.get(node, ())

    def parents_of(self, node: NodeId) -> tuple[NodeId, ...]:
        return self.parents.get(node, ())


NodeRecord = Union[EpisodeRecord, EntityRecord, CategoryRecord]


class MemoryStore:
    """In-memory base graph plus hierarchy, with BM25 and vector indexes."""

    def __init__(self, config: MemoryConfig | None = None, embedder: Embedder | None = None):
        self.config = config or MemoryConfig()
        self.embedder = embedder or HashEmbedder(self.config.embedding_dim)
        if self.embedder.dim != self.config.embedding_dim:
            raise ValueError(
                f"embedder dimension {self.embedder.dim} != configured {self.config.embedding_dim}")
        self.episodes: dict[NodeId, EpisodeRecord] = {}
        self.entities: dict[NodeId, EntityRecord] = {}
        self.edges: dict[NodeId, RelationEdge] = {}
        self._episode_entities: dict[NodeId, set[NodeId]] = {}
        self._entity_edges: dict[NodeId, set[NodeId]] = {}
        self._episode_keys: dict[tuple[str, datetime, str], NodeId] = {}
        self._timeline: list[tuple[datetime, NodeId]] = []
        self._hierarchy = HierarchyGeneration(number=0)
        self._next_seq = 1
        self.lexical = LexicalIndex(self.config.bm25_k1, self.config.bm25_b,
                                    self.config.entity_name_boost)
        self.vectors = VectorIndex(self.config.embedding_dim)
        self.write_lock = threading.RLock()

    # -- identifiers ---------------------------------------------------------

    def new_id(self, prefix: str) -> NodeId:
        with self.write_lock:
            seq = self._next_seq
            self._next_seq += 1
        return f"{prefix}-{seq:08d}"

    @property
    def next_seq(self) -> int:
        return self._next_seq

    # -- hierarchy access ----------------------------------------------------

    @property
    def hierarchy(self) -> HierarchyGeneration:
        return self._hierarchy

    @property
    def categories(self) -> dict[NodeId, CategoryRecord]:
        return self._hierarchy.categories

    # -- mutation --------------------------------------------------------------

    def _check_dim(self, record) -> list[str]:
        return record.problems(self.config.embedding_dim)

    def upsert_node(self, record: NodeRecord) -> NodeId:
        """Insert or replace a node; an empty id gets a fresh one."""
        if not record.id:
            record = replace(record, id=self.new_id(ID_PREFIX[type(record)]))
        problems = self._check_dim(record)
        if isinstance(record, EntityRecord):
            dangling = sorted(p for p in record.episode_idx if p not in self.episodes)
            if dangling:
                problems.append(f"episode_idx references unknown episodes {dangling}")
        if isinstance(record, CategoryRecord):
            problems += self._category_upsert_problems(record)
        if problems:
            raise InvariantError(problems)
        with self.write_lock:
            if isinstance(record, EpisodeRecord):
                self._put_episode(record)
            elif isinstance(record, EntityRecord):
                self._put_entity(record)
            elif isinstance(record, CategoryRecord):
                self._put_category(record)
            else:
                raise TypeError(f"not a node record: {type(record).__name__}")
        return record.id

    def _put_episode(self, ep: EpisodeRecord) -> None:
        old = self.episodes.get(ep.id)
        if old is not None:
            self._timeline.remove((old.valid_at, old.id))
            self._episode_keys.pop((old.source_session, old.valid_at, old.content), None)
        self.episodes[ep.id] = ep
        self._episode_entities.setdefault(ep.id, set())
        bisect.insort(self._timeline, (ep.valid_at, ep.id))
        self._episode_keys[(ep.source_session, ep.valid_at, ep.content)] = ep.id
        self.lexical.add("episode", ep.id, ep.content)
        self.vectors.add("episode", ep.id, ep.episode_embedding)

    def _put_entity(self, ent: EntityRecord) -> None:
        old = self.entities.get(ent.id)
        old_eps = old.episode_idx if old is not None else frozenset()
        for p in old_eps - ent.episode_idx:
            self._episode_entities[p].discard(ent.id)
        for p in ent.episode_idx - old_eps:
            self._episode_entities[p].add(ent.id)
        self.entities[ent.id] = ent
        self._entity_edges.setdefault(ent.id, set())
        self.lexical.add_entity(ent.id, ent.name, ent.summary)
        self.vectors.add("entity_summary", ent.id, ent.summary_embedding)
        self.vectors.add("entity_name", ent.id, ent.name_embedding)

    def _category_upsert_problems(self, cat: CategoryRecord) -> list[str]:
        gen = self._hierarchy
        old = gen.categories.get(cat.id)
        if old is not None and old.layer != cat.layer:
            return [f"category {cat.id} cannot change layer {old.layer} -> {cat.layer}"]
        return []

    def _put_category(self, cat: CategoryRecord) -> None:
        # copy-on-write: publish a new generation with the record replaced
        gen = self._hierarchy
        cats = dict(gen.categories)
        cats[cat.id] = cat
        self._hierarchy = HierarchyGeneration.build(gen.number + 1, cats.values(), gen.edges)

    def upsert_edge(self, edge: RelationEdge) -> NodeId:
        if not edge.id:
            edge = replace(edge, id=self.new_id("ed"))
        problems = self._check_dim(edge)
        for end in (edge.source, edge.target):
            if end not in self.entities:
                problems.append(f"edge endpoint {end} is not a stored entity")
        if problems:
            raise InvariantError(problems)
        with self.write_lock:
            old = self.edges.get(edge.id)
            if old is not None:
                self._entity_edges[old.source].discard(old.id)
                self._entity_edges[old.target].discard(old.id)
            self.edges[edge.id] = edge
            self._entity_edges[edge.source].add(edge.id)
            self._entity_edges[edge.target].add(edge.id)
            self.lexical.add("edge", edge.id, edge.fact)
            self.vectors.add("edge", edge.id, edge.fact_embedding)
        return edge.id

    # -- base-graph queries ---------------------------------------------------

    def find_episode(self, session: str, valid_at: datetime, content: str) -> EpisodeRecord | None:
        ep_id = self._episode_keys.get((session, to_timestamp(valid_at), content))
        return self.episodes.get(ep_id) if ep_id else None

    def recent_episodes(self, before: datetime, count: int) -> list[EpisodeRecord]:
        """Up to ``count`` episodes strictly earlier than ``before``, newest first."""
        if count <= 0:
            raise ValueError("count must be positive")
        before = to_timestamp(before)
        cut = bisect.bisect_left(self._timeline, (before, ""))
        picked = self._timeline[max(0, cut - count):cut]
        return [self.episodes[ep_id] for _, ep_id in reversed(picked)]

    def _entity(self, entity: NodeId) -> EntityRecord:
        try:
            return self.entities[entity]
        except KeyError:
            raise NotFoundError(entity) from None

    def episodes_of(self, entity: NodeId) -> set[EpisodeRecord]:
        ent = self._entity(entity)
        return {self.episodes[p] for p in ent.episode_idx}

    def entities_of(self, episode: NodeId) -> set[EntityRecord]:
        if episode not in self.episodes:
            raise NotFoundError(episode)
        return {self.entities[e] for e in self._episode_entities.get(episode, ())}

    def edges_of(self, entity: NodeId) -> set[tuple[RelationEdge, EntityRecord]]:
        self._entity(entity)
        out = set()
        for edge_id in self._entity_edges.get(entity, ()):
            edge = self.edges[edge_id]
            out.add((edge, self.entities[edge.other_end(entity)]))
        return out

    def edges_between(self, a: NodeId, b: NodeId) -> list[RelationEdge]:
        """Edges on the unordered entity pair {a, b}, sorted by id."""
        ids = self._entity_edges.get(a, set()) & self._entity_edges.get(b, set())
        if a == b:
            ids = {i for i in self._entity_edges.get(a, ()) if self.edges[i].source == self.edges[i].target}
        return [self.edges[i] for i in sorted(ids)]

    def episodic_edges(self) -> list[EpisodicEdge]:
        return sorted(EpisodicEdge(e.id, p) for e in self.entities.values() for p in e.episode_idx)

    def nodes_at_layer(self, layer: int) -> list[EntityRecord] | list[CategoryRecord]:
        if layer < 0:
            raise ValueError("layer must be >= 0")
        if layer == 0:
            return [self.entities[k] for k in sorted(self.entities)]
        return self._hierarchy.layer(layer)

    def node(self, node_id: NodeId) -> EntityRecord | CategoryRecord:
        if node_id in self.entities:
            return self.entities[node_id]
        cat = self._hierarchy.categories.get(node_id)
        if cat is None:
            raise NotFoundError(node_id)
        return cat

    def find_entity(self, name: str) -> EntityRecord | None:
        key = name.casefold()
        for ent_id in sorted(self.entities):
            if self.entities[ent_id].name.casefold() == key:
                return self.entities[ent_id]
        return None

    # -- hierarchy swap --------------------------------------------------------

    def hierarchy_problems(self, categories: Sequence[CategoryRecord],
                           edges: Sequence[CategoryEdge]) -> list[str]:
        problems = []
        cats = {}
        for c in categories:
            if c.id in cats:
                problems.append(f"duplicate category id {c.id}")
            cats[c.id] = c
            problems += [f"{c.id}: {p}" for p in c.problems(self.config.embedding_dim)]
        for e in edges:
            parent = cats.get(e.parent)
            if parent is None:
                problems.append(f"category edge parent {e.parent} not in new hierarchy")
                continue
            if e.child in cats:
                child_layer = cats[e.child].layer
            elif e.child in self.entities:
                child_layer = 0
            else:
                problems.append(f"category edge child {e.child} does not resolve")
                continue
            if parent.layer != child_layer + 1:
                problems.append(
                    f"edge {e.parent}->{e.child} spans layers {parent.layer}->{child_layer}")
        return problems

    def swap_hierarchy(self, categories: Sequence[CategoryRecord],
                       edges: Sequence[CategoryEdge]) -> HierarchyGeneration:
        """Atomically replace the hierarchy; returns the previous generation."""
        problems = self.hierarchy_problems(categories, edges)
        if problems:
            raise InvariantError(problems)
        with self.write_lock:
            previous = self._hierarchy
            self._hierarchy = HierarchyGeneration.build(previous.number + 1, categories, edges)
        logger.info("hierarchy generation %d published (%d categories)",
                    self._hierarchy.number, len(categories))
        return previous

    # -- audit ---------------------------------------------------------------

    def audit(self) -> AuditReport:
        report = AuditReport()
        dim = self.config.embedding_dim
        for ep in self.episodes.values():
            report.dimension += embedding_problems(ep.episode_embedding, dim, ep.id)
        for ent in self.entities.values():
            report.dimension += embedding_problems(ent.name_embedding, dim, ent.id)
            report.dimension += embedding_problems(ent.summary_embedding, dim, ent.id)
            for p in ent.episode_idx:
                if p not in self.episodes:
                    report.referential.append(f"{ent.id} -> missing episode {p}")
                elif ent.id not in self._episode_entities.get(p, ()):
                    report.episodic_lockstep.append(f"{ent.id} lists {p} without episodic edge")
        for p, ents in self._episode_entities.items():
            for e in ents:
                if e not in self.entities or p not in self.entities[e].episode_idx:
                    report.episodic_lockstep.append(f"episodic edge {e}->{p} without episode_idx entry")
        for edge in self.edges.values():
            report.dimension += embedding_problems(edge.fact_embedding, dim, edge.id)
            for end in (edge.source, edge.target):
                if end not in self.entities:
                    report.referential.append(f"{edge.id} -> missing entity {end}")
        gen = self._hierarchy
        for c in gen.categories.values():
            report.dimension += embedding_problems(c.name_embedding, dim, c.id)
            report.dimension += embedding_problems(c.summary_embedding, dim, c.id)
        for e in gen.edges:
            parent = gen.categories.get(e.parent)
            if parent is None:
                report.referential.append(f"category edge parent {e.parent} missing")
                continue
            if e.child in gen.categories:
                child_layer = gen.categories[e.child].layer
            elif e.child in self.entities:
                child_layer = 0
            else:
                report.referential.append(f"category edge child {e.child} missing")
                continue
            if parent.layer != child_layer + 1:
                report.layer_difference.append(f"{e.parent}->{e.child}")
        return report

    def stats(self) -> dict[str, object]:
        gen = self._hierarchy
        return {
            "episodes": len(self.episodes),
            "entities": len(self.entities),
            "edges": len(self.edges),
            "episodic_edges": sum(len(e.episode_idx) for e in self.entities.values()),
            "categories": len(gen.categories),
            "category_edges": len(gen.edges),
            "hierarchy_generation": gen.number,
            "layers": {str(k): len(v) for k, v in gen.layers.items()},
        }

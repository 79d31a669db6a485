"""Bottom-up construction of the category hierarchy.

Layer ``i`` is built from the nodes of layer ``i - 1``: the oracle groups
them into categories, categories with fewer than ``n`` children get one more
categorization attempt, and whatever still cannot be grouped is promoted as a
standalone category. From layer 2 onward a candidate layer may not hold more
nodes than the layer beneath it; a layer that breaks this rule, or that only
re-wraps every node as a singleton, is discarded and the build stops.

The new hierarchy is assembled off to the side and published with one
``swap_hierarchy`` call, so a failed build leaves the old one in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

from .config import MemoryConfig
from .model import (
    CategoryEdge,
    CategoryRecord,
    EntityRecord,
    NodeId,
    clamp_tags,
    sanitize_category_name,
)
from .oracle.base import SPEAKER_CATEGORY, CategorizationResult, CategoryAssignment, ConceptOracle
from .store import MemoryStore

logger = logging.getLogger(__name__)

REDUCTION_VIOLATION = "reduction-violation"
MAX_LAYERS = "max-layers"
CONVERGED = "converged-to-roots"

LayerNode = Union[EntityRecord, CategoryRecord]


@dataclass(frozen=True)
class BuildConfig:
    compression_ratio: int = 3
    max_layers: int = 5
    batch_size: int = 50

    def __post_init__(self) -> None:
        if self.compression_ratio < 2:
            raise ValueError("compression ratio n must be >= 2")
        if self.max_layers < 1:
            raise ValueError("max_layers must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_memory_config(cls, config: MemoryConfig, **overrides: Any) -> "BuildConfig":
        values = {
            "compression_ratio": config.compression_ratio,
            "max_layers": config.max_layers,
            "batch_size": config.categorize_batch_size,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class LayerReport:
    layer: int
    input_nodes: int
    categories: int
    promoted: int
    retried: int

    def to_json(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "input_nodes": self.input_nodes,
            "categories": self.categories,
            "promoted": self.promoted,
            "retried": self.retried,
        }


@dataclass
class HierarchyReport:
    compression_ratio: int
    max_layers: int
    layers: list[LayerReport] = field(default_factory=list)
    termination: str = MAX_LAYERS
    discarded_layer: int | None = None
    discarded_nodes: int | None = None
    generation: int = 0
    oracle_calls: int = 0
    audit: dict[str, list[str]] = field(default_factory=dict)

    @property
    def layer_counts(self) -> dict[int, int]:
        return {lr.layer: lr.categories for lr in self.layers}

    @property
    def promoted_counts(self) -> dict[int, int]:
        return {lr.layer: lr.promoted for lr in self.layers}

    @property
    def ok(self) -> bool:
        return not any(self.audit.values())

    def to_json(self) -> dict[str, Any]:
        return {
            "compression_ratio": self.compression_ratio,
            "max_layers": self.max_layers,
            "layers": [lr.to_json() for lr in self.layers],
            "layer_counts": {str(k): v for k, v in self.layer_counts.items()},
            "termination": self.termination,
            "discarded_layer": self.discarded_layer,
            "discarded_nodes": self.discarded_nodes,
            "generation": self.generation,
            "oracle_calls": self.oracle_calls,
            "audit": {k: list(v) for k, v in sorted(self.audit.items())},
        }


def check_compression(assignment: CategorizationResult | Sequence[CategoryAssignment],
                      n: int) -> tuple[list[CategoryAssignment], list[CategoryAssignment]]:
    """Split categories into those with >= n distinct children and the rest."""
    cats = assignment.categories if isinstance(assignment, CategorizationResult) else assignment
    ok, undersized = [], []
    for c in cats:
        (ok if len(set(c.indexes)) >= n else undersized).append(c)
    return ok, undersized


def check_reduction(candidate_count: int, previous_count: int, layer_index: int) -> bool:
    """True when the candidate layer may be kept; the rule starts at layer 2."""
    if layer_index < 1:
        raise ValueError("layer_index must be >= 1")
    return layer_index == 1 or candidate_count <= previous_count


def promote_singletons(nodes: Sequence[LayerNode], layer: int,
                       new_id: Callable[[], NodeId]) -> list[tuple[CategoryRecord, CategoryEdge]]:
    """Lift each node unchanged into ``layer`` as a one-child category."""
    out = []
    for node in nodes:
        cat = CategoryRecord(
            id=new_id(),
            name=sanitize_category_name(node.name),
            summary=node.summary,
            tag=node.tag,
            episode_idx=node.episode_idx,
            name_embedding=node.name_embedding,
            summary_embedding=node.summary_embedding,
            layer=layer,
            promoted=True,
        )
        out.append((cat, CategoryEdge(cat.id, node.id)))
    return out


def node_description(node: LayerNode) -> str:
    return ", ".join(node.tag) if node.tag else node.summary


@dataclass
class _Group:
    name: str
    members: list[int] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)

    def add(self, indexes: Sequence[int], tags: Sequence[str]) -> None:
        for i in indexes:
            if i not in self.members:
                self.members.append(i)
        self.tags.extend(tags)


class HierarchyBuilder:
    def __init__(self, store: MemoryStore, oracle: ConceptOracle, config: BuildConfig | None = None):
        self.store = store
        self.oracle = oracle
        self.config = config or BuildConfig.from_memory_config(store.config)

    def _new_id(self) -> NodeId:
        return self.store.new_id("ca")

    def _categorize(self, layer: int, nodes: Sequence[LayerNode], existing: list[str],
                    retry: bool) -> dict[str, _Group]:
        """Run the oracle over ``nodes`` in shards; groups keyed by category name."""
        groups: dict[str, _Group] = {}
        known = list(existing)
        size = self.config.batch_size
        for start in range(0, len(nodes), size):
            shard = nodes[start:start + size]
            result = self.oracle.categorize_nodes(
                layer, [(n.name, node_description(n)) for n in shard], known,
                self.config.compression_ratio, retry=retry)
            for a in result.categories:
                g = groups.setdefault(a.category, _Group(a.category))
                g.add([start + i for i in a.indexes], a.tag)
                if a.category not in known:
                    known.append(a.category)
        return groups

    def _make_category(self, layer: int, name: str, children: Sequence[LayerNode],
                       tags: Sequence[str], exempt: bool) -> CategoryRecord:
        embed = self.store.embedder.embed
        clean = sanitize_category_name(name)
        summary = "Category covering " + ", ".join(sorted({c.name for c in children}, key=str.casefold))
        clamped, _ = clamp_tags(tags)
        episodes: frozenset[NodeId] = frozenset().union(*(c.episode_idx for c in children))
        return CategoryRecord(
            id=self._new_id(),
            name=clean,
            summary=summary,
            tag=clamped,
            episode_idx=episodes,
            name_embedding=embed(clean),
            summary_embedding=embed(summary),
            layer=layer,
            promoted=exempt,
        )

    def build_layer(self, layer: int, nodes: Sequence[LayerNode]
                    ) -> tuple[list[CategoryRecord], list[CategoryEdge], LayerReport]:
        n = self.config.compression_ratio
        groups = self._categorize(layer, nodes, [], retry=False)
        ok = {name: g for name, g in groups.items() if len(g.members) >= n}
        covered = {i for g in ok.values() for i in g.members}
        orphans = [i for i in range(len(nodes)) if i not in covered]
        retried = len(orphans)

        if orphans:
            retry_groups = self._categorize(layer, [nodes[i] for i in orphans], list(ok), retry=True)
            for name, g in retry_groups.items():
                members = [orphans[i] for i in g.members]
                if name in ok:
                    ok[name].add(members, g.tags)
                elif len(members) >= n:
                    ok[name] = _Group(name, list(members), list(g.tags))
            covered = {i for g in ok.values() for i in g.members}
            orphans = [i for i in orphans if i not in covered]

        categories: list[CategoryRecord] = []
        edges: list[CategoryEdge] = []
        for name, g in ok.items():
            children = [nodes[i] for i in sorted(g.members)]
            cat = self._make_category(layer, name, children, g.tags, exempt=False)
            categories.append(cat)
            edges += [CategoryEdge(cat.id, c.id) for c in children]

        # first-person nodes always live under Speaker, even below n children
        speaker = [i for i in orphans if groups.get(SPEAKER_CATEGORY) and i in groups[SPEAKER_CATEGORY].members]
        if speaker:
            children = [nodes[i] for i in speaker]
            cat = self._make_category(layer, SPEAKER_CATEGORY, children, groups[SPEAKER_CATEGORY].tags, exempt=True)
            categories.append(cat)
            edges += [CategoryEdge(cat.id, c.id) for c in children]
            orphans = [i for i in orphans if i not in speaker]

        promoted = promote_singletons([nodes[i] for i in orphans], layer, self._new_id)
        for cat, edge in promoted:
            categories.append(cat)
            edges.append(edge)
        report = LayerReport(layer=layer, input_nodes=len(nodes), categories=len(categories),
                             promoted=len(promoted) + (1 if speaker else 0), retried=retried)
        return categories, edges, report

    def build(self) -> HierarchyReport:
        store = self.store
        if not store.entities:
            raise ValueError("base graph is empty; ingest before building the hierarchy")
        cfg = self.config
        report = HierarchyReport(cfg.compression_ratio, cfg.max_layers)
        calls_before = self.oracle.stats.total_calls
        all_cats: list[CategoryRecord] = []
        all_edges: list[CategoryEdge] = []
        previous: list[LayerNode] = list(store.nodes_at_layer(0))
        for i in range(1, cfg.max_layers + 1):
            if i >= 2 and len(previous) <= 1:
                report.termination = CONVERGED
                break
            cats, edges, layer_report = self.build_layer(i, previous)
            if not check_reduction(len(cats), len(previous), i):
                logger.info("layer %d has %d nodes > %d below; discarded", i, len(cats), len(previous))
                report.termination = REDUCTION_VIOLATION
                report.discarded_layer, report.discarded_nodes = i, len(cats)
                break
            if i >= 2 and all(c.promoted for c in cats):
                report.termination = CONVERGED
                report.discarded_layer, report.discarded_nodes = i, len(cats)
                break
            all_cats += cats
            all_edges += edges
            report.layers.append(layer_report)
            previous = sorted(cats, key=lambda c: c.id)
        else:
            report.termination = MAX_LAYERS
        store.swap_hierarchy(all_cats, all_edges)
        report.generation = store.hierarchy.number
        report.oracle_calls = self.oracle.stats.total_calls - calls_before
        report.audit = audit_hierarchy(store, cfg.compression_ratio)
        return report


def audit_hierarchy(store: MemoryStore, n: int) -> dict[str, list[str]]:
    """Constraint check of the active hierarchy; every list empty means clean."""
    gen = store.hierarchy
    out: dict[str, list[str]] = {"compression": [], "reduction": [], "leftover": [],
                                 "layer_difference": [], "childless": []}
    for c in gen.categories.values():
        kids = gen.children_of(c.id)
        if not kids:
            out["childless"].append(c.id)
        elif not c.promoted and len(kids) < n:
            out["compression"].append(f"{c.id} has {len(kids)} < {n} children")
    top = gen.top_layer
    counts = {0: len(store.entities), **{k: len(v) for k, v in gen.layers.items()}}
    for layer in range(2, top + 1):
        if counts.get(layer, 0) > counts.get(layer - 1, 0):
            out["reduction"].append(f"layer {layer}: {counts[layer]} > {counts[layer - 1]}")
    if top >= 1:
        below = [*store.entities] + [cid for layer in range(1, top) for cid in gen.layers.get(layer, ())]
        for node in below:
            if not gen.parents_of(node):
                out["leftover"].append(node)
    out["layer_difference"] = list(store.audit().layer_difference)
    return out


def build_hierarchy(store: MemoryStore, oracle: ConceptOracle,
                    config: BuildConfig | None = None) -> HierarchyReport:
    return HierarchyBuilder(store, oracle, config).build()

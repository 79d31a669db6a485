"""The judgment seam: every decision delegated to a language model goes here.

``ConceptOracle`` implements the public task methods once and delegates the
actual judgment to ``_``-prefixed hooks. Post-conditions (disjoint reflection
output, offered-id verdicts, tag limits, the no-leftover and Speaker rules)
are enforced in the public methods, so both the scripted and the remote
implementations satisfy the same contract.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Sequence

from ..model import EntityRecord, EpisodeRecord, RelationEdge, clamp_tags, has_connector_and

logger = logging.getLogger(__name__)

SPEAKER_CATEGORY = "Speaker"
FIRST_PERSON_NAMES = frozenset({"user", "i", "me"})
INSUFFICIENT_MEMORY = "insufficient memory"


class OracleError(Exception):
    pass


class OracleUnavailable(OracleError):
    """Transport failed after all retries."""


class OracleFormatError(OracleError):
    """Model output failed schema validation even after the repair reprompt."""


@dataclass(frozen=True)
class OracleResponse:
    task: str
    raw_text: str
    payload: Any


@dataclass(frozen=True)
class EdgeDraft:
    source: str
    target: str
    fact: str
    valid_at: datetime | None = None
    invalid_at: datetime | None = None


@dataclass(frozen=True)
class CategoryAssignment:
    category: str
    indexes: tuple[int, ...]
    tag: tuple[str, ...] = ()


@dataclass(frozen=True)
class CategorizationResult:
    categories: tuple[CategoryAssignment, ...]

    def problems(self, node_names: Sequence[str]) -> list[str]:
        out = []
        n = len(node_names)
        covered: set[int] = set()
        for c in self.categories:
            if not c.category.strip():
                out.append("empty category name")
            if has_connector_and(c.category):
                out.append(f"category {c.category!r} uses the connector 'and'")
            for i in c.indexes:
                if not 0 <= i < n:
                    out.append(f"index {i} out of range for {n} nodes")
            covered.update(c.indexes)
        leftover = sorted(set(range(n)) - covered)
        if leftover:
            out.append(f"ungrouped node indexes {leftover}")
        for i, name in enumerate(node_names):
            if name.strip().casefold() in FIRST_PERSON_NAMES:
                home = [c for c in self.categories if i in c.indexes and c.category == SPEAKER_CATEGORY]
                if not home:
                    out.append(f"node {name!r} must be in the {SPEAKER_CATEGORY!r} category")
        return out


@dataclass(frozen=True)
class OfferedNode:
    name: str
    uuid: str
    tags: tuple[str, ...] = ()
    layer: int = 0


@dataclass(frozen=True)
class SelectedNode:
    name: str
    uuid: str
    get_all_children: bool = False


@dataclass(frozen=True)
class NodeSelection:
    nodes: tuple[SelectedNode, ...] = ()

    @property
    def uuids(self) -> list[str]:
        return [n.uuid for n in self.nodes]


@dataclass
class OracleStats:
    calls: Counter = field(default_factory=Counter)
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def to_json(self) -> dict[str, Any]:
        return {
            "calls": dict(sorted(self.calls.items())),
            "total_calls": self.total_calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def dedupe_names(names: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for name in names:
        name = name.strip()
        key = name.casefold()
        if name and key not in seen:
            seen.add(key)
            out.append(name)
    return out


class ConceptOracle:
    """Base class; subclasses implement the ``_task`` hooks."""

    def __init__(self) -> None:
        self.stats = OracleStats()
        self._stats_lock = threading.Lock()
        self.warnings: list[str] = []

    def _count(self, task: str) -> None:
        with self._stats_lock:
            self.stats.calls[task] += 1

    def _warn(self, message: str) -> None:
        logger.warning(message)
        with self._stats_lock:
            self.warnings.append(message)

    # -- base-graph extraction ------------------------------------------------

    def extract_entity_names(self, current: EpisodeRecord, recent: Sequence[EpisodeRecord]) -> list[str]:
        self._count("extract_entity_names")
        if not current.content.strip():
            return []
        return dedupe_names(self._extract_entity_names(current, recent))

    def reflect_missing_names(self, current: EpisodeRecord, recent: Sequence[EpisodeRecord],
                              already_found: Sequence[str]) -> list[str]:
        self._count("reflect_missing_names")
        found = {n.casefold() for n in already_found}
        extra = self._reflect_missing_names(current, recent, list(already_found))
        return [n for n in dedupe_names(extra) if n.casefold() not in found]

    def resolve_duplicates(self, candidate_name: str, matched_existing: Sequence[EntityRecord]) -> str | None:
        """Id of the existing entity ``candidate_name`` refers to, or None for new."""
        self._count("resolve_duplicates")
        if not matched_existing:
            return None
        verdict = self._resolve_duplicates(candidate_name, list(matched_existing))
        offered = {e.id for e in matched_existing}
        if verdict is not None and verdict not in offered:
            self._warn(f"duplicate verdict {verdict!r} for {candidate_name!r} names an unoffered id; treated as new")
            return None
        return verdict

    def extract_entity_attributes(self, name: str, current: EpisodeRecord,
                                  recent: Sequence[EpisodeRecord]) -> tuple[str, tuple[str, ...]]:
        self._count("extract_entity_attributes")
        if not current.content.strip() and not recent:
            return name, ()
        summary, tags = self._extract_entity_attributes(name, current, recent)
        clamped, warnings = clamp_tags(tags)
        for w in warnings:
            self._warn(f"{name}: {w}")
        return (summary.strip() or name), clamped

    def extract_edges(self, current: EpisodeRecord, recent: Sequence[EpisodeRecord],
                      entities: Sequence[EntityRecord]) -> list[EdgeDraft]:
        self._count("extract_edges")
        return self._valid_drafts(self._extract_edges(current, recent, list(entities)), entities)

    def reflect_missing_edges(self, current: EpisodeRecord, recent: Sequence[EpisodeRecord],
                              entities: Sequence[EntityRecord], already_found: Sequence[EdgeDraft]) -> list[EdgeDraft]:
        self._count("reflect_missing_edges")
        drafts = self._valid_drafts(
            self._reflect_missing_edges(current, recent, list(entities), list(already_found)), entities)
        seen = {(d.source, d.target, d.fact) for d in already_found}
        return [d for d in drafts if (d.source, d.target, d.fact) not in seen]

    def _valid_drafts(self, drafts: Sequence[EdgeDraft], entities: Sequence[EntityRecord]) -> list[EdgeDraft]:
        known = {e.id for e in entities}
        out = []
        for d in drafts:
            if d.source not in known or d.target not in known:
                self._warn(f"edge draft {d.fact!r} references an unknown entity; dropped")
                continue
            if not d.fact.strip():
                self._warn("edge draft with empty fact dropped")
                continue
            out.append(d)
        return out

    def resolve_edge_duplicate(self, draft: EdgeDraft, candidates: Sequence[RelationEdge]) -> str | None:
        self._count("resolve_edge_duplicate")
        if not candidates:
            return None
        verdict = self._resolve_edge_duplicate(draft, list(candidates))
        if verdict is not None and verdict not in {c.id for c in candidates}:
            self._warn(f"edge verdict {verdict!r} names an unoffered id; treated as new")
            return None
        return verdict

    # -- hierarchy --------------------------------------------------------------

    def categorize_nodes(self, layer: int, nodes: Sequence[tuple[str, str]],
                         existing_categories: Sequence[str], n: int,
                         retry: bool = False) -> CategorizationResult:
        """Group ``(name, description)`` nodes; indexes refer to positions in ``nodes``."""
        self._count("categorize_nodes")
        if layer < 1:
            raise ValueError("categorization starts at layer 1")
        if not nodes:
            raise ValueError("nothing to categorize")
        result = self._categorize_nodes(layer, list(nodes), list(existing_categories), n, retry)
        problems = result.problems([name for name, _ in nodes])
        if problems:
            raise OracleFormatError("; ".join(problems))
        return result

    def select_nodes(self, query: str, offered: Sequence[OfferedNode]) -> NodeSelection:
        self._count("select_nodes")
        if not offered:
            return NodeSelection()
        selection = self._select_nodes(query, list(offered))
        by_uuid = {o.uuid: o for o in offered}
        kept = []
        seen = set()
        for node in selection.nodes:
            if node.uuid not in by_uuid:
                self._warn(f"selected uuid {node.uuid!r} was not offered; ignored")
                continue
            if node.uuid in seen:
                continue
            seen.add(node.uuid)
            kept.append(node)
        return NodeSelection(tuple(kept))

    # -- answering and judging -----------------------------------------------------

    def answer(self, query: str, context: Any) -> str:
        self._count("answer")
        if context is None or getattr(context, "is_empty", False):
            return INSUFFICIENT_MEMORY
        return self._answer(query, context)

    def judge(self, question: str, gold: str, predicted: str) -> int:
        self._count("judge")
        return 1 if self._judge(question, gold, predicted) else 0

    # -- hooks -------------------------------------------------------------------

    def _extract_entity_names(self, current, recent) -> list[str]:
        raise NotImplementedError

    def _reflect_missing_names(self, current, recent, already_found) -> list[str]:
        raise NotImplementedError

    def _resolve_duplicates(self, candidate_name, matched_existing) -> str | None:
        raise NotImplementedError

    def _extract_entity_attributes(self, name, current, recent) -> tuple[str, Sequence[str]]:
        raise NotImplementedError

    def _extract_edges(self, current, recent, entities) -> list[EdgeDraft]:
        raise NotImplementedError

    def _reflect_missing_edges(self, current, recent, entities, already_found) -> list[EdgeDraft]:
        raise NotImplementedError

    def _resolve_edge_duplicate(self, draft, candidates) -> str | None:
        raise NotImplementedError

    def _categorize_nodes(self, layer, nodes, existing_categories, n, retry) -> CategorizationResult:
        raise NotImplementedError

    def _select_nodes(self, query, offered) -> NodeSelection:
        raise NotImplementedError

    def _answer(self, query, context) -> str:
        raise NotImplementedError

    def _judge(self, question, gold, predicted) -> bool:
        raise NotImplementedError

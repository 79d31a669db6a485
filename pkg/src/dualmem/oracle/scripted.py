"""Deterministic oracle driven by a fixture table instead of a model.

Fixture keys (all optional)::

    lexicon          entity surface forms recognized by a case-insensitive,
                     word-bounded scan of the current episode
    aliases          {"Motor City": "Detroit"}; alias mentions are extracted
                     and resolve to the canonical entity
    withhold         names the first extraction pass skips (reflection finds them)
    descriptions     {name: summary}; otherwise "mentioned in episode <id>"
    tags             {name: [descriptor, ...]}
    relations        [{"trigger", "source", "target", "fact",
                       "valid_at"?, "invalid_at"?, "reflect"?}]
    cooccurrence     true (default): when no relation fires, link the first
                     entity of each sentence to every later one, fact = sentence
    taxonomy         {child name: [parent category, ...]}
    retry_taxonomy   consulted instead of ``taxonomy`` on retry passes
    category_tags    {category: [descriptor, ...]}
    selection        {query keyword or phrase: [node name, ...]}
    expand_all       node names selected with get_all_children = true
    match_names      also select nodes whose name shares a token with the query
    fail_edges_on    substrings; extract_edges raises OracleUnavailable when the
                     episode contains one (exercises abort semantics)

Every method is a pure function of its inputs and the fixture.
"""

from __future__ import annotations

import json
import re
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

from ..indexes import tokenize
from ..model import EntityRecord, EpisodeRecord, sanitize_category_name, to_timestamp
from .base import (
    FIRST_PERSON_NAMES,
    INSUFFICIENT_MEMORY,
    SPEAKER_CATEGORY,
    CategorizationResult,
    CategoryAssignment,
    ConceptOracle,
    EdgeDraft,
    NodeSelection,
    OfferedNode,
    OracleUnavailable,
    SelectedNode,
)

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_SPEAKER_PREFIX = re.compile(r"^[^:\n]{1,40}:\s+")


def _bounded(surface: str) -> re.Pattern:
    return re.compile(r"(?<![^\W_])" + re.escape(surface) + r"(?![^\W_])", re.IGNORECASE)


def normalize_text(text: str) -> str:
    return " ".join(tokenize(text))


class ScriptedOracle(ConceptOracle):
    def __init__(self, fixture: dict[str, Any] | None = None):
        super().__init__()
        fx = dict(fixture or {})
        self.fixture = fx
        self.lexicon: list[str] = list(fx.get("lexicon", []))
        self.aliases: dict[str, str] = {k.casefold(): v for k, v in fx.get("aliases", {}).items()}
        self._alias_surfaces: list[str] = list(fx.get("aliases", {}))
        self.withhold = {w.casefold() for w in fx.get("withhold", [])}
        self.descriptions = {k.casefold(): v for k, v in fx.get("descriptions", {}).items()}
        self.tags = {k.casefold(): list(v) for k, v in fx.get("tags", {}).items()}
        self.relations: list[dict[str, Any]] = list(fx.get("relations", []))
        self.cooccurrence = bool(fx.get("cooccurrence", True))
        self.taxonomy = {k.casefold(): list(v) for k, v in fx.get("taxonomy", {}).items()}
        self.retry_taxonomy = {k.casefold(): list(v) for k, v in fx.get("retry_taxonomy", {}).items()}
        self.category_tags = {k.casefold(): list(v) for k, v in fx.get("category_tags", {}).items()}
        self.selection = {tuple(tokenize(k)): {n.casefold() for n in v}
                          for k, v in fx.get("selection", {}).items()}
        self.expand_all = {n.casefold() for n in fx.get("expand_all", [])}
        self.match_names = bool(fx.get("match_names", False))
        self.fail_edges_on = list(fx.get("fail_edges_on", []))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedOracle":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    # -- helpers -------------------------------------------------------------

    def canonical(self, name: str) -> str:
        return self.aliases.get(name.casefold(), name)

    @cached_property
    def _surface_patterns(self) -> list[tuple[str, re.Pattern]]:
        surfaces = list(dict.fromkeys(self.lexicon + self._alias_surfaces))
        # longer surfaces first so "car show" wins over "car"
        surfaces.sort(key=lambda s: (-len(s), s.casefold()))
        return [(s, _bounded(s)) for s in surfaces]

    def mentions(self, text: str) -> list[str]:
        """Lexicon/alias surfaces in ``text``, ordered by first position."""
        taken: list[tuple[int, int]] = []
        found: list[tuple[int, str]] = []
        for surface, pattern in self._surface_patterns:
            for m in pattern.finditer(text):
                if any(m.start() < end and start < m.end() for start, end in taken):
                    continue
                taken.append((m.start(), m.end()))
                found.append((m.start(), surface))
        found.sort()
        out: list[str] = []
        seen: set[str] = set()
        for _, surface in found:
            if surface.casefold() not in seen:
                seen.add(surface.casefold())
                out.append(surface)
        return out

    def _entity_surfaces(self, entity: EntityRecord) -> set[str]:
        canon = self.canonical(entity.name).casefold()
        surfaces = {entity.name.casefold(), canon}
        surfaces.update(a for a, c in self.aliases.items() if c.casefold() == canon)
        return surfaces

    def _entity_positions(self, text: str, entities: Sequence[EntityRecord]) -> list[tuple[int, EntityRecord]]:
        found = {m.casefold(): i for i, m in enumerate(self.mentions(text))}
        ranked = []
        for ent in entities:
            hits = [found[s] for s in self._entity_surfaces(ent) if s in found]
            if hits:
                ranked.append((min(hits), ent))
        ranked.sort(key=lambda t: (t[0], t[1].id))
        return ranked

    def _resolve_entity(self, name: str, entities: Sequence[EntityRecord]) -> EntityRecord | None:
        target = self.canonical(name).casefold()
        for ent in entities:
            if ent.name.casefold() == name.casefold() or self.canonical(ent.name).casefold() == target:
                return ent
        return None

    # -- extraction ------------------------------------------------------------

    def _extract_entity_names(self, current, recent):
        return [m for m in self.mentions(current.content) if m.casefold() not in self.withhold]

    def _reflect_missing_names(self, current, recent, already_found):
        return [m for m in self.mentions(current.content) if m.casefold() in self.withhold]

    def _resolve_duplicates(self, candidate_name, matched_existing):
        target = self.canonical(candidate_name).casefold()
        for ent in matched_existing:
            if ent.name.casefold() == candidate_name.casefold():
                return ent.id
        for ent in matched_existing:
            if self.canonical(ent.name).casefold() == target:
                return ent.id
        return None

    def _extract_entity_attributes(self, name, current, recent):
        key = name.casefold()
        canon = self.canonical(name).casefold()
        summary = self.descriptions.get(key) or self.descriptions.get(canon)
        if summary is None:
            summary = f"mentioned in episode {current.id}"
        tags = self.tags.get(key) or self.tags.get(canon) or []
        return summary, tags

    def _relation_drafts(self, current: EpisodeRecord, entities, reflect: bool) -> list[EdgeDraft]:
        text = current.content.casefold()
        drafts = []
        for rel in self.relations:
            if bool(rel.get("reflect", False)) != reflect:
                continue
            if rel["trigger"].casefold() not in text:
                continue
            src = self._resolve_entity(rel["source"], entities)
            tgt = self._resolve_entity(rel["target"], entities)
            if src is None or tgt is None:
                continue
            drafts.append(EdgeDraft(
                source=src.id,
                target=tgt.id,
                fact=rel["fact"],
                valid_at=to_timestamp(rel["valid_at"]) if rel.get("valid_at") else None,
                invalid_at=to_timestamp(rel["invalid_at"]) if rel.get("invalid_at") else None,
            ))
        return drafts

    def _any_relation_fires(self, current: EpisodeRecord) -> bool:
        text = current.content.casefold()
        return any(rel["trigger"].casefold() in text for rel in self.relations)

    def _extract_edges(self, current, recent, entities):
        for trigger in self.fail_edges_on:
            if trigger.casefold() in current.content.casefold():
                raise OracleUnavailable(f"scripted outage on {trigger!r}")
        drafts = self._relation_drafts(current, entities, reflect=False)
        if drafts or self._any_relation_fires(current) or not self.cooccurrence:
            return drafts
        for i, sentence in enumerate(_SENTENCE_SPLIT.split(current.content.strip())):
            present = self._entity_positions(sentence, entities)
            if len(present) < 2:
                continue
            fact = _SPEAKER_PREFIX.sub("", sentence, count=1) if i == 0 else sentence
            head = present[0][1]
            for _, other in present[1:]:
                if other.id != head.id:
                    drafts.append(EdgeDraft(source=head.id, target=other.id, fact=fact.strip()))
        return drafts

    def _reflect_missing_edges(self, current, recent, entities, already_found):
        return self._relation_drafts(current, entities, reflect=True)

    def _resolve_edge_duplicate(self, draft, candidates):
        key = normalize_text(draft.fact)
        for c in candidates:
            if normalize_text(c.fact) == key:
                return c.id
        return None

    # -- hierarchy ---------------------------------------------------------------

    def _categorize_nodes(self, layer, nodes, existing_categories, n, retry):
        order: list[str] = []
        members: dict[str, list[int]] = {}
        for i, (name, _description) in enumerate(nodes):
            key = name.strip().casefold()
            if key in FIRST_PERSON_NAMES:
                parents = [SPEAKER_CATEGORY]
            elif retry and key in self.retry_taxonomy:
                parents = self.retry_taxonomy[key]
            else:
                parents = self.taxonomy.get(key) or [sanitize_category_name(name)]
            for parent in parents:
                if parent not in members:
                    members[parent] = []
                    order.append(parent)
                if i not in members[parent]:
                    members[parent].append(i)
        return CategorizationResult(tuple(
            CategoryAssignment(
                category=cat,
                indexes=tuple(sorted(members[cat])),
                tag=tuple(self.category_tags.get(cat.casefold(), ())),
            )
            for cat in order
        ))

    def _select_nodes(self, query, offered: list[OfferedNode]):
        q_tokens = tokenize(query)
        q_set = set(q_tokens)
        wanted: set[str] = set()
        for key, names in self.selection.items():
            if key and all(t in q_set for t in key):
                wanted |= names
        picked = []
        for node in offered:
            name_key = node.name.casefold()
            hit = name_key in wanted or (self.match_names and bool(q_set & set(tokenize(node.name))))
            if hit:
                picked.append(SelectedNode(node.name, node.uuid, name_key in self.expand_all))
        return NodeSelection(tuple(picked))

    # -- answering ---------------------------------------------------------------

    def _answer(self, query, context):
        # the best-ranked line of each evidence section stands in for a model's answer
        tops = [lines[0] for section in ("episodes", "entities", "facts")
                if (lines := context.sections.get(section))]
        return " | ".join(tops) if tops else INSUFFICIENT_MEMORY

    def _judge(self, question, gold, predicted):
        gold_n = normalize_text(gold)
        return bool(gold_n) and f" {gold_n} " in f" {normalize_text(predicted)} "

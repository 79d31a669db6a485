"""Query-time engine: hybrid similarity search, hierarchy selection, reranking.

System 1 runs BM25 and exact cosine search per item kind and fuses the two
rank lists with reciprocal rank fusion. System 2 walks the category hierarchy
top-down, asking the oracle which nodes matter at each layer. The union of
both routes is reranked per kind and truncated to the evidence budget.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import httpx

from .indexes import tokenize
from .model import CategoryRecord, EntityRecord, EpisodeRecord, NodeId, RelationEdge, format_date, format_timestamp
from .oracle.base import ConceptOracle, OfferedNode, OracleUnavailable
from .store import HierarchyGeneration, MemoryStore

logger = logging.getLogger(__name__)

LEXICAL = "system1-lexical"
VECTOR = "system1-vector"
SYSTEM2 = "system2"
ROUTES = ("both", "s1", "s2")
KINDS = ("episodes", "entities", "edges")
SCORE_DIGITS = 12


class HierarchyAbsent(LookupError):
    """System-2-only retrieval was requested but no hierarchy exists."""


@dataclass
class RankedItem:
    kind: str  # episode | entity | category | edge
    id: NodeId
    display_text: str
    score: float = 0.0
    route: set[str] = field(default_factory=set)
    ranks: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "id": self.id,
            "text": self.display_text,
            "score": round(self.score, SCORE_DIGITS),
            "route": sorted(self.route),
            "ranks": dict(sorted(self.ranks.items())),
        }


@dataclass(frozen=True)
class SearchBudget:
    k: int = 10

    def __post_init__(self) -> None:
        if self.k <= 0:
            raise ValueError("k must be positive")

    @property
    def entity_edge_limit(self) -> int:
        return 2 * self.k

    def limit(self, kind: str) -> int:
        return self.k if kind == "episodes" else self.entity_edge_limit


def rrf_fuse(rank_lists: Sequence[Sequence[NodeId]], c: int = 0) -> list[tuple[NodeId, float]]:
    """Reciprocal rank fusion; ranks are 1-based positions in each list.

    Ties on score go to the item with the better best rank, then to the
    smaller id.
    """
    if c < 0:
        raise ValueError("smoothing constant must be non-negative")
    scores: dict[NodeId, float] = {}
    best: dict[NodeId, int] = {}
    for ranked in rank_lists:
        for pos, item in enumerate(ranked, start=1):
            scores[item] = scores.get(item, 0.0) + 1.0 / (c + pos)
            best[item] = min(best.get(item, pos), pos)
    order = sorted(scores, key=lambda x: (-scores[x], best[x], x))
    return [(x, scores[x]) for x in order]


# -- display text ---------------------------------------------------------------


def validity_span(edge: RelationEdge) -> str:
    end = format_date(edge.invalid_at) if edge.invalid_at is not None else "now"
    return f"({format_date(edge.valid_at)} - {end})"


def display_text(record: EpisodeRecord | EntityRecord | CategoryRecord | RelationEdge) -> str:
    if isinstance(record, EpisodeRecord):
        return record.content
    if isinstance(record, RelationEdge):
        return f"{record.fact} {validity_span(record)}"
    return f"{record.name}: {record.summary}"


def _item(store: MemoryStore, gen: HierarchyGeneration, kind: str, node_id: NodeId) -> RankedItem:
    if kind == "episodes":
        return RankedItem("episode", node_id, display_text(store.episodes[node_id]))
    if kind == "edges":
        return RankedItem("edge", node_id, display_text(store.edges[node_id]))
    if node_id in store.entities:
        return RankedItem("entity", node_id, display_text(store.entities[node_id]))
    return RankedItem("category", node_id, display_text(gen.categories[node_id]))


# -- System 1 ---------------------------------------------------------------------

_LEX_KIND = {"episodes": "episode", "entities": "entity", "edges": "edge"}
_VEC_KIND = {"episodes": "episode", "entities": "entity_summary", "edges": "edge"}


@dataclass
class RouteLists:
    """Per-kind intermediate lists of one System-1 run (kept for the trace)."""

    lexical: dict[str, list[tuple[NodeId, float]]] = field(default_factory=dict)
    vector: dict[str, list[tuple[NodeId, float]]] = field(default_factory=dict)
    fused: dict[str, list[RankedItem]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        def pairs(rows):
            return [[i, round(s, SCORE_DIGITS)] for i, s in rows]

        return {
            "lexical": {k: pairs(v) for k, v in self.lexical.items()},
            "vector": {k: pairs(v) for k, v in self.vector.items()},
            "fused": {k: [[it.id, round(it.score, SCORE_DIGITS)] for it in v] for k, v in self.fused.items()},
        }


def similarity_search(store: MemoryStore, query: str, budget: SearchBudget,
                      c: int | None = None) -> RouteLists:
    """Hybrid BM25 + cosine search per kind, RRF-fused and truncated to budget."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    c = store.config.rrf_c if c is None else c
    gen = store.hierarchy
    qvec = store.embedder.embed(query)
    out = RouteLists()
    for kind in KINDS:
        limit = budget.limit(kind)
        depth = limit * store.config.candidate_depth_factor
        lex = store.lexical.search(query, _LEX_KIND[kind], depth)
        vec = store.vectors.search(qvec, _VEC_KIND[kind], depth)
        out.lexical[kind] = lex
        out.vector[kind] = vec
        lex_ids = [i for i, _ in lex]
        vec_ids = [i for i, _ in vec]
        lex_rank = {i: r for r, i in enumerate(lex_ids, start=1)}
        vec_rank = {i: r for r, i in enumerate(vec_ids, start=1)}
        items = []
        for node_id, score in rrf_fuse([lex_ids, vec_ids], c)[:limit]:
            item = _item(store, gen, kind, node_id)
            item.score = score
            if node_id in lex_rank:
                item.route.add(LEXICAL)
                item.ranks[LEXICAL] = lex_rank[node_id]
            if node_id in vec_rank:
                item.route.add(VECTOR)
                item.ranks[VECTOR] = vec_rank[node_id]
            items.append(item)
        out.fused[kind] = items
    return out


# -- System 2 ---------------------------------------------------------------------


@dataclass
class SelectionResult:
    status: str = "ok"  # ok | hierarchy-absent | empty-selection
    items: dict[str, list[RankedItem]] = field(default_factory=lambda: {k: [] for k in KINDS})
    layers: list[dict[str, Any]] = field(default_factory=list)
    paths: list[list[str]] = field(default_factory=list)
    oracle_calls: int = 0

    @property
    def empty(self) -> bool:
        return not any(self.items.values())

    def ids(self, kind: str) -> set[NodeId]:
        return {it.id for it in self.items[kind]}

    def to_json(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "oracle_calls": self.oracle_calls,
            "layers": self.layers,
            "paths": self.paths,
            "items": {k: sorted(it.id for it in v) for k, v in self.items.items()},
        }


def _subtree(gen: HierarchyGeneration, root: NodeId) -> set[NodeId]:
    seen: set[NodeId] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        for child in gen.children_of(node):
            if child not in seen:
                seen.add(child)
                stack.append(child)
    return seen


def global_selection(store: MemoryStore, oracle: ConceptOracle, query: str) -> SelectionResult:
    """Top-down browse of the hierarchy; the result set is unordered."""
    gen = store.hierarchy  # one consistent generation for the whole walk
    result = SelectionResult()
    if gen.empty:
        result.status = "hierarchy-absent"
        return result

    def name_of(node_id: NodeId) -> str:
        if node_id in gen.categories:
            return gen.categories[node_id].name
        return store.entities[node_id].name

    def tags_of(node_id: NodeId) -> tuple[str, ...]:
        if node_id in gen.categories:
            return gen.categories[node_id].tag
        return store.entities[node_id].tag

    via: dict[NodeId, NodeId] = {}
    categories: set[NodeId] = set()
    entities: set[NodeId] = set()
    layer = gen.top_layer
    frontier = sorted(gen.layers[layer])
    while frontier:
        offered = [OfferedNode(name_of(n), n, tags_of(n), layer) for n in frontier]
        selection = oracle.select_nodes(query, offered)
        result.oracle_calls += 1
        picked = selection.uuids
        result.layers.append({
            "layer": layer,
            "offered": len(offered),
            "selected": picked,
            "expanded": [s.uuid for s in selection.nodes if s.get_all_children],
        })
        next_frontier: set[NodeId] = set()
        for sel in selection.nodes:
            node = sel.uuid
            if layer == 0:
                entities.add(node)
                continue
            categories.add(node)
            if sel.get_all_children:
                for desc in sorted(_subtree(gen, node)):
                    via.setdefault(desc, node)
                    (categories if desc in gen.categories else entities).add(desc)
            else:
                for child in gen.children_of(node):
                    via.setdefault(child, node)
                    next_frontier.add(child)
        layer -= 1
        # nodes already pulled in by a full-subtree expansion need no second look
        frontier = sorted(next_frontier - categories - entities)

    if not categories and not entities:
        result.status = "empty-selection"
        return result

    for ent in sorted(entities):
        chain = [name_of(ent)]
        node = ent
        while node in via:
            node = via[node]
            chain.append(name_of(node))
        result.paths.append(list(reversed(chain)))
    result.paths.sort()

    episode_ids: set[NodeId] = set()
    edge_ids: set[NodeId] = set()
    all_entities = set(entities)
    for ent in entities:
        episode_ids.update(store.entities[ent].episode_idx)
        for edge, other in store.edges_of(ent):
            edge_ids.add(edge.id)
            all_entities.add(other.id)
    for kind, ids in (("episodes", episode_ids), ("entities", all_entities | categories), ("edges", edge_ids)):
        items = []
        for node_id in sorted(ids):
            item = _item(store, gen, kind, node_id)
            item.route.add(SYSTEM2)
            items.append(item)
        result.items[kind] = items
    return result


# -- reranking --------------------------------------------------------------------


class Reranker(Protocol):
    def rerank(self, query: str, items: Sequence[RankedItem]) -> list[RankedItem]: ...


def overlap_score(query_tokens: Sequence[str], text: str) -> float:
    """Fraction of query token mass whose token appears in ``text``."""
    if not query_tokens:
        return 0.0
    present = set(tokenize(text))
    counts = Counter(query_tokens)
    hit = sum(n for t, n in counts.items() if t in present)
    return hit / len(query_tokens)


def _ordered(items: Sequence[RankedItem]) -> list[RankedItem]:
    return sorted(items, key=lambda it: (-it.score, it.id))


class LexicalReranker:
    """Weighted token overlap between the query and each item's display text."""

    name = "lexical"

    def rerank(self, query: str, items: Sequence[RankedItem]) -> list[RankedItem]:
        q = tokenize(query)
        for it in items:
            it.score = overlap_score(q, it.display_text)
        return _ordered(items)


class RemoteReranker:
    """Cross-encoder style scoring via a ``POST {base}/rerank`` endpoint.

    Request ``{"model", "query", "documents"}``; response
    ``{"results": [{"index", "relevance_score"}]}``. Any failure falls back to
    the lexical scorer.
    """

    name = "remote"

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 transport: httpx.BaseTransport | None = None, timeout: float = 60.0):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                    timeout=timeout, transport=transport)
        self.model = model
        self.fallback = LexicalReranker()
        self.fallbacks = 0

    def rerank(self, query: str, items: Sequence[RankedItem]) -> list[RankedItem]:
        if not items:
            return []
        try:
            resp = self._client.post("/rerank", json={
                "model": self.model, "query": query, "documents": [it.display_text for it in items]})
            resp.raise_for_status()
            scores = {int(r["index"]): float(r["relevance_score"]) for r in resp.json()["results"]}
            if set(scores) != set(range(len(items))):
                raise ValueError("rerank response does not score every document")
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            logger.warning("remote reranker failed (%s); using lexical scores", exc)
            self.fallbacks += 1
            return self.fallback.rerank(query, items)
        for i, it in enumerate(items):
            it.score = scores[i]
        return _ordered(items)


# -- combined search and context ----------------------------------------------------


@dataclass
class SearchResult:
    final: dict[str, list[RankedItem]]
    system1: RouteLists | None
    system2: SelectionResult | None
    route: str
    k: int

    def to_json(self) -> dict[str, Any]:
        return {
            "route": self.route,
            "k": self.k,
            "system1": self.system1.to_json() if self.system1 else None,
            "system2": self.system2.to_json() if self.system2 else None,
            "final": {k: [it.to_json() for it in v] for k, v in self.final.items()},
        }


def _merge(pool: dict[NodeId, RankedItem], item: RankedItem) -> None:
    have = pool.get(item.id)
    if have is None:
        pool[item.id] = RankedItem(item.kind, item.id, item.display_text, item.score,
                                   set(item.route), dict(item.ranks))
    else:
        have.route |= item.route
        have.ranks.update(item.ranks)


def combined_search(store: MemoryStore, oracle: ConceptOracle | None, query: str,
                    budget: SearchBudget, route: str = "both",
                    reranker: Reranker | None = None) -> SearchResult:
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}")
    reranker = reranker or LexicalReranker()
    s1 = similarity_search(store, query, budget) if route in ("both", "s1") else None
    s2 = None
    if route in ("both", "s2"):
        if store.hierarchy.empty:
            if route == "s2":
                raise HierarchyAbsent("hierarchy absent: build it before System-2 retrieval")
            s2 = SelectionResult(status="hierarchy-absent")
        else:
            if oracle is None:
                raise ValueError("System-2 retrieval needs an oracle")
            s2 = global_selection(store, oracle, query)
            if s2.status != "ok" and route == "both":
                logger.info("System-2 returned nothing (%s); using System-1 evidence only", s2.status)
    final: dict[str, list[RankedItem]] = {}
    for kind in KINDS:
        pool: dict[NodeId, RankedItem] = {}
        for source in (s1.fused[kind] if s1 else [], s2.items[kind] if s2 else []):
            for item in source:
                _merge(pool, item)
        ranked = reranker.rerank(query, [pool[i] for i in sorted(pool)])
        final[kind] = ranked[:budget.limit(kind)]
    return SearchResult(final=final, system1=s1, system2=s2, route=route, k=budget.k)


@dataclass(frozen=True)
class MemoryContext:
    text: str
    sections: dict[str, list[str]]

    @property
    def is_empty(self) -> bool:
        return not any(self.sections.values())


def assemble_context(store: MemoryStore, final: dict[str, list[RankedItem]]) -> MemoryContext:
    """Render evidence as EPISODES / ENTITIES / FACTS sections in rank order."""
    gen = store.hierarchy
    episodes = []
    for it in final.get("episodes", []):
        ep = store.episodes[it.id]
        episodes.append(f"[{format_timestamp(ep.valid_at)}] {ep.content}")
    entities = []
    for it in final.get("entities", []):
        if it.kind == "category":
            cat = gen.categories.get(it.id)
            layer = cat.layer if cat is not None else "?"
            name, _, summary = it.display_text.partition(": ")
            entities.append(f"{name} (category, layer {layer}): {summary}")
        else:
            entities.append(it.display_text)
    facts = [it.display_text for it in final.get("edges", [])]
    sections = {"episodes": episodes, "entities": entities, "facts": facts}
    blocks = []
    for header, key in (("EPISODES", "episodes"), ("ENTITIES", "entities"), ("FACTS", "facts")):
        lines = [header] + [f"- {line}" for line in sections[key]]
        blocks.append("\n".join(lines))
    return MemoryContext(text="\n\n".join(blocks) + "\n", sections=sections)


@dataclass
class AnswerResult:
    question: str
    answer: str
    search: SearchResult
    context: MemoryContext

    @property
    def evidence(self) -> dict[str, list[RankedItem]]:
        return self.search.final

    def trace(self) -> dict[str, Any]:
        s2_calls = self.search.system2.oracle_calls if self.search.system2 else 0
        return {
            **self.search.to_json(),
            "oracle_calls": {"select_nodes": s2_calls, "answer": 1},
        }

    def to_json(self) -> dict[str, Any]:
        return {"question": self.question, "answer": self.answer, "trace": self.trace()}


def answer_query(store: MemoryStore, oracle: ConceptOracle, query: str,
                 budget: SearchBudget | None = None, route: str = "both",
                 reranker: Reranker | None = None) -> AnswerResult:
    """Retrieve, render the context and ask the oracle.

    An ``OracleUnavailable`` raised by the answer call carries the finished
    retrieval on its ``result`` attribute.
    """
    budget = budget or SearchBudget(store.config.top_k)
    if store.episodes or store.entities:
        search = combined_search(store, oracle, query, budget, route, reranker)
    else:
        search = SearchResult(final={k: [] for k in KINDS}, system1=None, system2=None,
                              route=route, k=budget.k)
    context = assemble_context(store, search.final)
    result = AnswerResult(question=query, answer="", search=search, context=context)
    try:
        result.answer = oracle.answer(query, context)
    except OracleUnavailable as exc:
        exc.result = result
        raise
    return result


def make_reranker(kind: str, base_url: str | None = None, model: str | None = None,
                  api_key: str | None = None) -> Reranker:
    if kind == "lexical":
        return LexicalReranker()
    if kind == "remote":
        if not base_url or not model:
            raise ValueError("remote reranker needs base_url and model")
        return RemoteReranker(base_url, model, api_key)
    raise ValueError(f"unknown reranker {kind!r}")

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone

import pytest

from dualmem.config import MemoryConfig
from dualmem.embedding import HashEmbedder
from dualmem.model import CategoryEdge, CategoryRecord, EntityRecord, EpisodeRecord, InvariantError, RelationEdge
from dualmem.store import MemoryStore, NotFoundError

T0 = datetime(2023, 6, 1, tzinfo=timezone.utc)


def small_store():
    s = MemoryStore(MemoryConfig(embedding_dim=32))
    e = s.embedder.embed
    eps = [s.upsert_node(EpisodeRecord("", f"msg {i}", T0 + timedelta(hours=i), e(f"msg {i}"), "s"))
           for i in range(4)]
    a = s.upsert_node(EntityRecord("", "Alice", "a person", (), frozenset(eps[:2]), e("Alice"), e("a person")))
    b = s.upsert_node(EntityRecord("", "Bob", "another", (), frozenset(eps[1:3]), e("Bob"), e("another")))
    ed = s.upsert_edge(RelationEdge("", a, b, "Alice knows Bob", e("Alice knows Bob"), T0))
    return s, eps, a, b, ed


def test_ids_share_one_sequence_with_kind_prefixes():
    s, eps, a, b, ed = small_store()
    assert eps == ["ep-00000001", "ep-00000002", "ep-00000003", "ep-00000004"]
    assert (a, b, ed) == ("en-00000005", "en-00000006", "ed-00000007")
    assert s.new_id("ca") == "ca-00000008"


def test_traversals():
    s, eps, a, b, ed = small_store()
    assert {x.id for x in s.episodes_of(a)} == set(eps[:2])
    assert {x.id for x in s.entities_of(eps[1])} == {a, b}
    assert s.entities_of(eps[3]) == set()
    (edge, other), = s.edges_of(a)
    assert edge.id == ed and other.id == b
    assert [x.id for x in s.edges_between(b, a)] == [ed]
    with pytest.raises(NotFoundError):
        s.episodes_of("en-99999999")


def test_episodic_edges_follow_episode_idx():
    s, eps, a, b, ed = small_store()
    ent = s.entities[a]
    s.upsert_node(EntityRecord(a, ent.name, ent.summary, (), frozenset({eps[3]}),
                               ent.name_embedding, ent.summary_embedding))
    assert {x.id for x in s.entities_of(eps[0])} == set()
    assert {x.id for x in s.entities_of(eps[3])} == {a}
    assert s.audit().ok


def test_recent_episodes_are_strictly_earlier_newest_first():
    s, eps, *_ = small_store()
    got = [x.id for x in s.recent_episodes(T0 + timedelta(hours=3), 2)]
    assert got == [eps[2], eps[1]]
    assert s.recent_episodes(T0, 4) == []
    with pytest.raises(ValueError):
        s.recent_episodes(T0, 0)


def test_invalid_records_are_rejected():
    s, eps, a, b, ed = small_store()
    e = s.embedder.embed
    with pytest.raises(InvariantError):
        s.upsert_node(EntityRecord("", "X", "", (), frozenset({"ep-missing"}), e("X"), e("")))
    with pytest.raises(InvariantError):
        s.upsert_edge(RelationEdge("", a, "en-missing", "f", e("f"), T0))
    with pytest.raises(InvariantError):
        s.upsert_node(EpisodeRecord("", "short", T0, (1.0,), "s"))
    with pytest.raises(InvariantError):
        s.upsert_edge(RelationEdge("", a, a, "self", e("self"), T0))
    s.upsert_edge(RelationEdge("", a, a, "self", e("self"), T0, reflexive=True))


def test_embedder_dimension_must_match_config():
    with pytest.raises(ValueError):
        MemoryStore(MemoryConfig(embedding_dim=16), HashEmbedder(8))


def _cat(cid, name, layer, emb, promoted=False):
    return CategoryRecord(cid, name, "s", (), frozenset(), emb, emb, layer, promoted)


def test_swap_hierarchy_validates_and_publishes_new_generation():
    s, eps, a, b, ed = small_store()
    emb = s.embedder.embed("People")
    before = s.hierarchy
    s.swap_hierarchy([_cat("ca-1", "People", 1, emb)], [CategoryEdge("ca-1", a), CategoryEdge("ca-1", b)])
    assert s.hierarchy.number == before.number + 1
    assert s.hierarchy.children_of("ca-1") == (a, b)
    assert s.nodes_at_layer(1)[0].name == "People"
    with pytest.raises(InvariantError):
        s.swap_hierarchy([_cat("ca-2", "Top", 2, emb)], [CategoryEdge("ca-2", a)])  # skips a layer
    # the failed swap left the published generation untouched
    assert s.hierarchy.children_of("ca-1") == (a, b)


def test_readers_see_whole_generations_during_swaps():
    s, eps, a, b, ed = small_store()
    emb = s.embedder.embed("x")
    stop = threading.Event()
    seen_bad = []

    def reader():
        while not stop.is_set():
            gen = s.hierarchy
            for cid in gen.categories:
                if set(gen.children_of(cid)) != {a, b}:
                    seen_bad.append(cid)

    t = threading.Thread(target=reader)
    t.start()
    for i in range(200):
        s.swap_hierarchy([_cat(f"ca-{i}", f"Group {i}", 1, emb)],
                         [CategoryEdge(f"ca-{i}", a), CategoryEdge(f"ca-{i}", b)])
    stop.set()
    t.join()
    assert not seen_bad


def test_stats_and_find_entity():
    s, *_ = small_store()
    st = s.stats()
    assert (st["episodes"], st["entities"], st["edges"], st["episodic_edges"]) == (4, 2, 1, 4)
    assert s.find_entity("alice").name == "Alice"
    assert s.find_entity("carol") is None

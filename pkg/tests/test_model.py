from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualmem.model import (
    CategoryRecord,
    ConfigurationError,
    EntityRecord,
    RelationEdge,
    clamp_tags,
    cosine,
    format_date,
    format_timestamp,
    has_connector_and,
    merge_entity_attributes,
    sanitize_category_name,
    tag_problems,
    to_timestamp,
    truncate_embedding,
)


def vec(*xs):
    return tuple(float(x) for x in xs)


def test_to_timestamp_normalizes_to_utc():
    a = to_timestamp("2023-06-10T12:00:00+02:00")
    assert a == datetime(2023, 6, 10, 10, 0, tzinfo=timezone.utc)
    assert to_timestamp("2023-06-10T10:00:00Z") == a
    assert format_timestamp(a) == "2023-06-10T10:00:00Z"
    assert format_date(a) == "2023-06-10"


def test_naive_timestamp_is_read_as_utc():
    assert to_timestamp("2023-06-10T10:00:00").tzinfo is not None


@given(st.datetimes(min_value=datetime(1971, 1, 1), max_value=datetime(2100, 1, 1),
                    timezones=st.just(timezone.utc)))
def test_timestamp_round_trip(dt):
    dt = dt.replace(microsecond=0)
    assert to_timestamp(format_timestamp(dt)) == dt


def test_cosine_basics():
    assert cosine(vec(1, 0), vec(1, 0)) == pytest.approx(1.0)
    assert cosine(vec(1, 0), vec(0, 1)) == pytest.approx(0.0)
    assert cosine(vec(1, 0), vec(-1, 0)) == pytest.approx(-1.0)
    assert cosine(vec(0, 0), vec(1, 0)) == 0.0


def test_truncate_embedding_renormalizes():
    out = truncate_embedding([3.0, 4.0, 12.0], 2)
    assert len(out) == 2
    assert sum(x * x for x in out) == pytest.approx(1.0)
    assert out[0] == pytest.approx(0.6)


@pytest.mark.parametrize("name,expected", [
    ("Food and Drink", True),
    ("AND gate", True),
    ("Andes", False),
    ("Sandwiches", False),
    ("Rock & Roll", False),
])
def test_connector_and_detection(name, expected):
    assert has_connector_and(name) is expected


def test_sanitize_category_name_drops_connector():
    cleaned = sanitize_category_name("Food and Drink")
    assert not has_connector_and(cleaned)
    assert "Food" in cleaned and "Drink" in cleaned


def test_tags_are_clamped_to_five_short_descriptors():
    tags, dropped = clamp_tags(["a", "b", "c", "d", "e", "f"])
    assert tags == ("a", "b", "c", "d", "e")
    assert dropped
    assert tag_problems(["one two three four"])  # four words is too long
    assert not tag_problems(["pet", "small dog"])


@given(st.lists(st.text(min_size=1, max_size=20), max_size=12))
def test_clamped_tags_always_valid(raw):
    tags, _ = clamp_tags(raw)
    assert len(tags) <= 5
    assert not tag_problems(tags)


def _entity(eid, name, summary, tags, eps, dim=4):
    return EntityRecord(eid, name, summary, tuple(tags), frozenset(eps), (1.0,) * dim, (0.5,) * dim)


def test_merge_unions_episodes_and_prefers_new_summary():
    old = _entity("en-1", "Biscuit", "a dog", ["dog"], ["ep-1"])
    new = _entity("en-1", "biscuit", "Alice's beagle", ["pet"], ["ep-2"])
    merged = merge_entity_attributes(old, new)
    assert merged.name == "Biscuit"
    assert merged.summary == "Alice's beagle"
    assert merged.episode_idx == {"ep-1", "ep-2"}
    assert merged.tag == ("pet", "dog")


def test_merge_keeps_old_summary_when_new_is_blank():
    old = _entity("en-1", "Biscuit", "a dog", [], ["ep-1"])
    new = _entity("en-1", "Biscuit", "  ", [], ["ep-2"])
    assert merge_entity_attributes(old, new).summary == "a dog"


def test_merge_rejects_dimension_mismatch():
    old = _entity("en-1", "A", "x", [], [], dim=4)
    new = _entity("en-1", "A", "y", [], [], dim=3)
    with pytest.raises(ConfigurationError):
        merge_entity_attributes(old, new)


def test_record_problems():
    t = to_timestamp("2023-01-01T00:00:00Z")
    edge = RelationEdge("ed-1", "en-1", "en-1", "self", (1.0, 0.0), t)
    assert any("self-edge" in p for p in edge.problems(2))
    edge = RelationEdge("ed-1", "en-1", "en-2", "x", (1.0, 0.0), t, t - timedelta(days=1))
    assert any("invalid_at" in p for p in edge.problems(2))
    cat = CategoryRecord("ca-1", "Food and Drink", "s", (), frozenset(), (1.0, 0.0), (1.0, 0.0), layer=0)
    probs = cat.problems(2)
    assert any("layer" in p for p in probs) and any("connector" in p for p in probs)
    ent = EntityRecord("en-1", "A", "s", (), frozenset(), (1.0,), (1.0, 0.0))
    assert any("name_embedding" in p for p in ent.problems(2))

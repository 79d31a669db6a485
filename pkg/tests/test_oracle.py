from __future__ import annotations

import json
from datetime import datetime, timezone

import httpx
import pytest

from dualmem.embedding import HashEmbedder
from dualmem.model import EntityRecord, EpisodeRecord
from dualmem.oracle import (
    INSUFFICIENT_MEMORY,
    SPEAKER_CATEGORY,
    CategorizationResult,
    CategoryAssignment,
    OfferedNode,
    OracleFormatError,
    OracleUnavailable,
    ScriptedOracle,
)
from dualmem.oracle.prompts import categorize_messages, load_template, render, task_messages
from dualmem.oracle.remote import ChatClient, RemoteOracle, parse_json_text

EMB = HashEmbedder(16)
T = datetime(2023, 6, 10, 9, 0, tzinfo=timezone.utc)


def ep(text, eid="ep-00000001"):
    return EpisodeRecord(eid, text, T, EMB.embed(text), "s")


def ent(eid, name):
    return EntityRecord(eid, name, "", (), frozenset(), EMB.embed(name), EMB.embed(""))


# -- scripted ------------------------------------------------------------------------


def test_scripted_extraction_and_reflection_are_disjoint():
    o = ScriptedOracle({"lexicon": ["Dave", "Detroit", "car show"], "withhold": ["car show"]})
    e = ep("Dave: I went to Detroit for the car show.")
    names = o.extract_entity_names(e, [])
    assert names == ["Dave", "Detroit"]
    assert o.reflect_missing_names(e, [], names) == ["car show"]
    assert o.reflect_missing_names(e, [], ["Dave", "Detroit", "car show"]) == []


def test_scripted_aliases_resolve_to_canonical_entity():
    o = ScriptedOracle({"lexicon": ["Detroit"], "aliases": {"Motor City": "Detroit"}})
    assert o.extract_entity_names(ep("Back in Motor City again."), []) == ["Motor City"]
    assert o.resolve_duplicates("Motor City", [ent("en-1", "Detroit")]) == "en-1"
    assert o.resolve_duplicates("Chicago", [ent("en-1", "Detroit")]) is None


def test_unoffered_duplicate_verdict_is_treated_as_new():
    class Liar(ScriptedOracle):
        def _resolve_duplicates(self, candidate_name, matched_existing):
            return "en-404"

    o = Liar({})
    assert o.resolve_duplicates("x", [ent("en-1", "x")]) is None
    assert any("unoffered" in w for w in o.warnings)


def test_cooccurrence_edges_strip_speaker_prefix():
    o = ScriptedOracle({"lexicon": ["Alice", "Biscuit"]})
    e = ep("Alice: I walked Biscuit. Biscuit met Alice at home.")
    a, b = ent("en-1", "Alice"), ent("en-2", "Biscuit")
    drafts = o.extract_edges(e, [], [a, b])
    assert [(d.source, d.target, d.fact) for d in drafts] == [
        ("en-1", "en-2", "I walked Biscuit."),
        ("en-2", "en-1", "Biscuit met Alice at home."),
    ]


def test_edge_drafts_with_unknown_endpoints_are_dropped():
    o = ScriptedOracle({"lexicon": ["A", "B"], "relations": [
        {"trigger": "likes", "source": "A", "target": "C", "fact": "A likes C"}]})
    assert o.extract_edges(ep("A likes B"), [], [ent("en-1", "A"), ent("en-2", "B")]) == []


def test_categorization_contract_enforces_speaker_and_coverage():
    o = ScriptedOracle({"taxonomy": {"dog": ["Pets"], "cat": ["Pets"]}})
    res = o.categorize_nodes(1, [("dog", ""), ("cat", ""), ("User", ""), ("rock", "")], [], 2)
    by = {c.category: c.indexes for c in res.categories}
    assert by == {"Pets": (0, 1), SPEAKER_CATEGORY: (2,), "rock": (3,)}
    bad = CategorizationResult((CategoryAssignment("Food and Drink", (0,)),))
    probs = bad.problems(["a", "b"])
    assert any("connector" in p for p in probs) and any("ungrouped" in p for p in probs)


def test_selection_ignores_unoffered_uuids():
    class Wild(ScriptedOracle):
        def _select_nodes(self, query, offered):
            from dualmem.oracle import NodeSelection, SelectedNode
            return NodeSelection((SelectedNode("x", "ca-404"), SelectedNode("y", offered[0].uuid)))

    o = Wild({})
    sel = o.select_nodes("q", [OfferedNode("y", "ca-1")])
    assert sel.uuids == ["ca-1"]
    assert o.select_nodes("q", []).uuids == []


def test_scripted_answer_and_judge():
    o = ScriptedOracle({})

    class Ctx:
        is_empty = False
        sections = {"episodes": ["[t] one", "[t] two"], "entities": [], "facts": ["fact (x)"]}

    assert o.answer("q", Ctx()) == "[t] one | fact (x)"
    assert o.answer("q", None) == INSUFFICIENT_MEMORY
    assert o.judge("q", "Portland", "they went to portland, oregon") == 1
    assert o.judge("q", "port", "they went to portland") == 0


# -- prompts ---------------------------------------------------------------------------


def test_templates_render_without_leftover_placeholders():
    msgs = categorize_messages(2, "0. Dogs: pets", "- Animals", '"Dogs"')
    text = "\n".join(m["content"] for m in msgs)
    assert "{layer" not in text and "context[" not in text
    for name in ("extract_entities", "answer", "judge"):
        assert load_template(name).strip()
    with pytest.raises(KeyError):
        task_messages("answer", context="c")
    assert render("{{a}} {b}", {"b": 1}) == "{a} 1"


# -- remote ----------------------------------------------------------------------------


def chat_reply(content, status=200):
    body = {"choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 3}}
    return httpx.Response(status, json=body)


def remote(handler, attempts=3):
    sleeps = []
    client = ChatClient("http://oracle.test/v1", "m", api_key="k", attempts=attempts,
                        transport=httpx.MockTransport(handler), sleep=sleeps.append)
    return RemoteOracle(client), sleeps


def test_wire_format_and_auth_header():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return chat_reply('{"names": ["Dave", "dave", " "]}')

    o, _ = remote(handler)
    assert o.extract_entity_names(ep("Dave: hi"), []) == ["Dave"]
    assert seen["url"] == "http://oracle.test/v1/chat/completions"
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["model"] == "m" and seen["body"]["temperature"] == 0
    assert seen["body"]["messages"][0]["role"] == "user"
    assert o.stats.prompt_tokens == 10 and o.stats.completion_tokens == 3


def test_retries_transient_failures_with_backoff():
    replies = iter([httpx.Response(503), httpx.Response(429), chat_reply('{"answer": "Detroit"}')])
    o, sleeps = remote(lambda r: next(replies))

    class Ctx:
        is_empty = False
        text = "ctx"

    assert o.answer("q", Ctx()) == "Detroit"
    assert sleeps == [1.0, 2.0]


def test_gives_up_after_three_attempts():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused")

    o, sleeps = remote(handler)
    with pytest.raises(OracleUnavailable):
        o.extract_entity_names(ep("x"), [])
    assert len(calls) == 3 and sleeps == [1.0, 2.0]


def test_client_errors_are_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    o, _ = remote(handler)
    with pytest.raises(OracleUnavailable):
        o.extract_entity_names(ep("x"), [])
    assert len(calls) == 1


def test_repair_reprompt_then_success():
    bodies = []
    replies = iter(['not json', '```json\n{"names": ["A"]}\n```'])

    def handler(request):
        bodies.append(json.loads(request.content))
        return chat_reply(next(replies))

    o, _ = remote(handler)
    assert o.extract_entity_names(ep("A"), []) == ["A"]
    repair = bodies[1]["messages"]
    assert repair[-2] == {"role": "assistant", "content": "not json"}
    assert "invalid" in repair[-1]["content"]


def test_second_invalid_output_is_a_format_error():
    o, _ = remote(lambda r: chat_reply('{"wrong": 1}'))
    with pytest.raises(OracleFormatError):
        o.extract_entity_names(ep("A"), [])


def test_categorization_semantic_check_triggers_repair():
    replies = iter([
        '[{"category": "Pets", "indexes": [0]}]',  # leaves index 1 ungrouped
        '[{"category": "Pets", "indexes": [0, 1], "tag": ["animals"]}]',
    ])
    o, _ = remote(lambda r: chat_reply(next(replies)))
    res = o.categorize_nodes(1, [("dog", "pet"), ("cat", "pet")], [], 2)
    assert res.categories[0].indexes == (0, 1)


def test_edge_timestamps_are_validated_and_parsed():
    replies = iter([
        '{"edges": [{"source": "en-1", "target": "en-2", "fact": "f", "valid_at": "soon"}]}',
        '{"edges": [{"source": "en-1", "target": "en-2", "fact": "f", "valid_at": "2023-06-01T00:00:00Z"}]}',
    ])
    o, _ = remote(lambda r: chat_reply(next(replies)))
    drafts = o.extract_edges(ep("x"), [], [ent("en-1", "a"), ent("en-2", "b")])
    assert drafts[0].valid_at == datetime(2023, 6, 1, tzinfo=timezone.utc)


def test_parse_json_text_strips_fences():
    assert parse_json_text('```\n[1, 2]\n```') == [1, 2]
    with pytest.raises(ValueError):
        parse_json_text("nope")

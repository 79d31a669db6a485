"""Concept oracle backed by an OpenAI-compatible chat-completions endpoint."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from typing import Any, Callable

import httpx
import jsonschema

from ..model import format_timestamp, to_timestamp
from . import prompts
from .base import (
    CategorizationResult,
    CategoryAssignment,
    ConceptOracle,
    EdgeDraft,
    NodeSelection,
    OracleFormatError,
    OracleResponse,
    OracleUnavailable,
    SelectedNode,
)

logger = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}
_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.IGNORECASE)

_STR_LIST = {"type": "array", "items": {"type": "string"}}
_NULLABLE_STR = {"type": ["string", "null"]}
_EDGE_LIST = {
    "type": "object",
    "required": ["edges"],
    "properties": {"edges": {"type": "array", "items": {
        "type": "object",
        "required": ["source", "target", "fact"],
        "properties": {"source": {"type": "string"}, "target": {"type": "string"},
                       "fact": {"type": "string"}, "valid_at": _NULLABLE_STR,
                       "invalid_at": _NULLABLE_STR},
    }}},
}

SCHEMAS: dict[str, dict[str, Any]] = {
    "extract_entity_names": {"type": "object", "required": ["names"], "properties": {"names": _STR_LIST}},
    "reflect_missing_names": {"type": "object", "required": ["missed"], "properties": {"missed": _STR_LIST}},
    "resolve_duplicates": {"type": "object", "required": ["same_as"], "properties": {"same_as": _NULLABLE_STR}},
    "resolve_edge_duplicate": {"type": "object", "required": ["same_as"], "properties": {"same_as": _NULLABLE_STR}},
    "extract_entity_attributes": {"type": "object", "required": ["summary", "tag"],
                                  "properties": {"summary": {"type": "string"}, "tag": _STR_LIST}},
    "extract_edges": _EDGE_LIST,
    "reflect_missing_edges": _EDGE_LIST,
    "categorize_nodes": {"type": "array", "items": {
        "type": "object",
        "required": ["category", "indexes"],
        "properties": {"category": {"type": "string"},
                       "indexes": {"type": "array", "items": {"type": "integer"}},
                       "tag": _STR_LIST},
    }},
    "select_nodes": {"type": "array", "items": {
        "type": "object",
        "required": ["uuid"],
        "properties": {"name": {"type": "string"}, "uuid": {"type": "string"},
                       "get_all_children": {"type": "boolean"}},
    }},
    "answer": {"type": "object", "required": ["answer"], "properties": {"answer": {"type": "string"}}},
    "judge": {"type": "object", "required": ["label"],
              "properties": {"label": {"type": "string", "enum": ["CORRECT", "WRONG"]}}},
}


class ChatClient:
    """Minimal chat-completions transport with retry on transient failures.

    Three attempts with exponential backoff (1s, 2s) on transport errors and
    retryable HTTP statuses; other HTTP errors fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.0,
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model = model
        self.temperature = temperature
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                    timeout=timeout, transport=transport)

    def complete(self, messages: list[dict[str, str]]) -> tuple[str, dict[str, int]]:
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        last_error: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post("/chat/completions", json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                logger.warning("chat transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                last_error = httpx.HTTPStatusError(f"status {resp.status_code}",
                                                   request=resp.request, response=resp)
                logger.warning("chat endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise OracleUnavailable(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
            body = resp.json()
            text = body["choices"][0]["message"]["content"] or ""
            return text, body.get("usage") or {}
        raise OracleUnavailable(f"chat endpoint failed after {self.attempts} attempts: {last_error}")

    def close(self) -> None:
        self._client.close()


def parse_json_text(text: str) -> Any:
    cleaned = _FENCE.sub("", text.strip()).strip()
    return json.loads(cleaned)


def _episode_text(ep) -> str:
    return f"[{format_timestamp(ep.valid_at)}] {ep.content}"


def _recent_text(recent) -> str:
    return "\n".join(_episode_text(e) for e in recent) or "(none)"


class RemoteOracle(ConceptOracle):
    def __init__(self, client: ChatClient):
        super().__init__()
        self.client = client
        self.responses: list[OracleResponse] = []

    @classmethod
    def from_settings(cls, base_url: str, model: str, api_key_env: str = "DUALMEM_ORACLE_KEY",
                      temperature: float = 0.0, **kwargs: Any) -> "RemoteOracle":
        return cls(ChatClient(base_url, model, api_key=os.environ.get(api_key_env),
                              temperature=temperature, **kwargs))

    def call(self, task: str, messages: list[dict[str, str]],
             check: Callable[[Any], list[str]] | None = None) -> OracleResponse:
        """Send, parse and validate; one repair reprompt on invalid output."""
        schema = SCHEMAS[task]
        convo = list(messages)
        for attempt in range(2):
            raw, usage = self.client.complete(convo)
            with self._stats_lock:
                self.stats.prompt_tokens += int(usage.get("prompt_tokens", 0))
                self.stats.completion_tokens += int(usage.get("completion_tokens", 0))
            try:
                payload = parse_json_text(raw)
                jsonschema.validate(payload, schema)
                problems = check(payload) if check else []
                if problems:
                    raise ValueError("; ".join(problems))
            except (ValueError, jsonschema.ValidationError) as exc:
                error = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
                if attempt == 0:
                    logger.warning("%s: invalid model output, reprompting: %s", task, error)
                    convo = convo + [
                        {"role": "assistant", "content": raw},
                        {"role": "user", "content": f"The previous output was invalid: {error}. "
                                                    "Return corrected JSON only."},
                    ]
                    continue
                raise OracleFormatError(f"{task}: {error}") from exc
            response = OracleResponse(task=task, raw_text=raw, payload=payload)
            self.responses.append(response)
            return response
        raise AssertionError("unreachable")

    # -- hooks -------------------------------------------------------------------

    def _extract_entity_names(self, current, recent):
        msgs = prompts.task_messages("extract_entities", current=_episode_text(current),
                                     recent=_recent_text(recent))
        return self.call("extract_entity_names", msgs).payload["names"]

    def _reflect_missing_names(self, current, recent, already_found):
        msgs = prompts.task_messages("reflect_entities", current=_episode_text(current),
                                     recent=_recent_text(recent), found=json.dumps(already_found))
        return self.call("reflect_missing_names", msgs).payload["missed"]

    def _resolve_duplicates(self, candidate_name, matched_existing):
        lines = "\n".join(f"{e.id} | {e.name} | {e.summary}" for e in matched_existing)
        msgs = prompts.task_messages("dedupe_entity", name=candidate_name, candidates=lines)
        return self.call("resolve_duplicates", msgs).payload["same_as"]

    def _extract_entity_attributes(self, name, current, recent):
        msgs = prompts.task_messages("entity_attributes", name=name, current=_episode_text(current),
                                     recent=_recent_text(recent))
        payload = self.call("extract_entity_attributes", msgs).payload
        return payload["summary"], payload["tag"]

    @staticmethod
    def _drafts(payload) -> list[EdgeDraft]:
        out = []
        for e in payload["edges"]:
            out.append(EdgeDraft(
                source=e["source"], target=e["target"], fact=e["fact"],
                valid_at=to_timestamp(e["valid_at"]) if e.get("valid_at") else None,
                invalid_at=to_timestamp(e["invalid_at"]) if e.get("invalid_at") else None,
            ))
        return out

    def _edge_check(self, payload) -> list[str]:
        problems = []
        for e in payload["edges"]:
            for key in ("valid_at", "invalid_at"):
                if e.get(key):
                    try:
                        to_timestamp(e[key])
                    except ValueError as exc:
                        problems.append(str(exc))
        return problems

    def _extract_edges(self, current, recent, entities):
        ents = "\n".join(f"{e.id} | {e.name}" for e in entities)
        msgs = prompts.task_messages("extract_edges", entities=ents, current=current.content,
                                     recent=_recent_text(recent), timestamp=format_timestamp(current.valid_at))
        return self._drafts(self.call("extract_edges", msgs, self._edge_check).payload)

    def _reflect_missing_edges(self, current, recent, entities, already_found):
        ents = "\n".join(f"{e.id} | {e.name}" for e in entities)
        found = json.dumps([{"source": d.source, "target": d.target, "fact": d.fact} for d in already_found])
        msgs = prompts.task_messages("reflect_edges", entities=ents, current=current.content,
                                     found=found, timestamp=format_timestamp(current.valid_at))
        return self._drafts(self.call("reflect_missing_edges", msgs, self._edge_check).payload)

    def _resolve_edge_duplicate(self, draft, candidates):
        lines = "\n".join(f"{c.id} | {c.fact}" for c in candidates)
        msgs = prompts.task_messages("dedupe_edge", fact=draft.fact, candidates=lines)
        return self.call("resolve_edge_duplicate", msgs).payload["same_as"]

    def _categorize_nodes(self, layer, nodes, existing_categories, n, retry):
        content = "\n".join(f"{i}. {name}: {desc}" for i, (name, desc) in enumerate(nodes))
        existing = "\n".join(f"- {c}" for c in existing_categories) or "(none)"
        prev_example = ", ".join(f'"{name}"' for name, _ in nodes[:5])
        msgs = prompts.categorize_messages(layer, content, existing, prev_example)

        def parse(payload) -> CategorizationResult:
            return CategorizationResult(tuple(
                CategoryAssignment(item["category"].strip(), tuple(item["indexes"]),
                                   tuple(item.get("tag", ())))
                for item in payload
            ))

        names = [name for name, _ in nodes]
        response = self.call("categorize_nodes", msgs, lambda p: parse(p).problems(names))
        return parse(response.payload)

    def _select_nodes(self, query, offered):
        info = "\n".join(
            f"- name: {o.name} | uuid: {o.uuid} | tags: {json.dumps(list(o.tags))} | layer: {o.layer}"
            for o in offered)
        msgs = prompts.node_selection_messages(query, info)
        payload = self.call("select_nodes", msgs).payload
        by_uuid = {o.uuid: o for o in offered}
        picked = []
        for item in payload:
            known = by_uuid.get(item["uuid"])
            name = item.get("name") or (known.name if known else "")
            picked.append(SelectedNode(name, item["uuid"], bool(item.get("get_all_children", False))))
        return NodeSelection(tuple(picked))

    def _answer(self, query, context):
        msgs = prompts.task_messages("answer", context=context.text, query=query)
        return self.call("answer", msgs).payload["answer"]

    def _judge(self, question, gold, predicted):
        msgs = prompts.task_messages("judge", question=question, gold=gold, predicted=predicted)
        return self.call("judge", msgs).payload["label"] == "CORRECT"


__all__ = ["ChatClient", "RemoteOracle", "SCHEMAS", "parse_json_text"]

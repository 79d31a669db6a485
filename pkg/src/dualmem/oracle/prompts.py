"""Prompt templates shipped as text assets.

Templates use ``{name}`` placeholders and ``{{``/``}}`` for literal braces.
Placeholder names may contain spaces or brackets (``{layer - 1}``,
``{context['content']}``), so rendering is a plain substitution rather than
``str.format``.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from typing import Any

TEMPLATE_VERSION = "1"
_TOKEN = re.compile(r"\{\{|\}\}|\{([^{}]+)\}")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, values: dict[str, Any]) -> str:
    def sub(m: re.Match) -> str:
        token = m.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {key!r} has no value")
        return str(values[key])

    return _TOKEN.sub(sub, template)


def categorize_messages(layer: int, content: str, existing_categories: str,
                        prev_example: str) -> list[dict[str, str]]:
    values = {
        "layer": layer,
        "layer - 1": layer - 1,
        "prev_example": prev_example,
        "context['content']": content,
        "context['existing_categories']": existing_categories,
    }
    guidance = render(load_template("categorize_guidance"), values)
    values["guidance"] = guidance
    return [
        {"role": "system", "content": render(load_template("categorize_system"), values)},
        {"role": "user", "content": render(load_template("categorize_user"), values)},
    ]


def node_selection_messages(query: str, nodes_info: str) -> list[dict[str, str]]:
    prompt = render(load_template("node_selection"), {"query": query, "nodes_info": nodes_info})
    prompt += ('\nReturn JSON only: a list of objects '
               '[{"name": "...", "uuid": "...", "get_all_children": false}]. '
               'Return [] if no node helps.\n')
    return [{"role": "user", "content": prompt}]


def task_messages(name: str, **values: Any) -> list[dict[str, str]]:
    return [{"role": "user", "content": render(load_template(name), values)}]

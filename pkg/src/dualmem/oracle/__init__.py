"""Concept oracles: the scripted fixture-driven one and the remote chat one."""

from __future__ import annotations

from ..config import OracleSettings
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
    OracleError,
    OracleFormatError,
    OracleStats,
    OracleUnavailable,
    SelectedNode,
)
from .scripted import ScriptedOracle


def make_oracle(settings: OracleSettings) -> ConceptOracle:
    if settings.kind == "scripted":
        if not settings.fixture:
            return ScriptedOracle({})
        return ScriptedOracle.from_file(settings.fixture)
    if settings.kind == "remote":
        from .remote import RemoteOracle

        if not settings.base_url or not settings.model:
            raise OracleUnavailable("remote oracle needs base_url and model (DUALMEM_ORACLE_URL / DUALMEM_ORACLE_MODEL)")
        return RemoteOracle.from_settings(settings.base_url, settings.model,
                                          api_key_env=settings.api_key_env,
                                          temperature=settings.temperature)
    raise ValueError(f"unknown oracle kind {settings.kind!r}")


__all__ = [
    "FIRST_PERSON_NAMES",
    "INSUFFICIENT_MEMORY",
    "SPEAKER_CATEGORY",
    "CategorizationResult",
    "CategoryAssignment",
    "ConceptOracle",
    "EdgeDraft",
    "NodeSelection",
    "OfferedNode",
    "OracleError",
    "OracleFormatError",
    "OracleStats",
    "OracleUnavailable",
    "ScriptedOracle",
    "SelectedNode",
    "make_oracle",
]

"""Dual-route long-term memory for conversational agents.

A temporal knowledge graph of episodes, entities and facts, a category
hierarchy built over it, and a retriever that combines fast similarity
search with top-down selection through the hierarchy.
"""

from __future__ import annotations

from .config import MemoryConfig, OracleSettings, load_config
from .embedding import HashEmbedder, RemoteEmbedder
from .hierarchy import BuildConfig, HierarchyBuilder, HierarchyReport, build_hierarchy
from .ingest import IngestAborted, IngestReport, Ingestor, Message, ingest, read_corpus
from .oracle import ConceptOracle, ScriptedOracle, make_oracle
from .retrieval import SearchBudget, answer_query, combined_search, global_selection, rrf_fuse, similarity_search
from .snapshot import load_snapshot, save_snapshot
from .store import MemoryStore

__version__ = "0.1.0"

__all__ = [
    "BuildConfig",
    "ConceptOracle",
    "HashEmbedder",
    "HierarchyBuilder",
    "HierarchyReport",
    "IngestAborted",
    "IngestReport",
    "Ingestor",
    "MemoryConfig",
    "MemoryStore",
    "Message",
    "OracleSettings",
    "RemoteEmbedder",
    "ScriptedOracle",
    "SearchBudget",
    "answer_query",
    "build_hierarchy",
    "combined_search",
    "global_selection",
    "ingest",
    "load_config",
    "load_snapshot",
    "make_oracle",
    "read_corpus",
    "rrf_fuse",
    "save_snapshot",
    "similarity_search",
]

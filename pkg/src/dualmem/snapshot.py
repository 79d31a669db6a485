"""Snapshot container for a ``MemoryStore``.

A snapshot is a zip archive holding one line-delimited JSON stream per record
kind plus ``manifest.json``::

    manifest.json          schema version, embedding dim, counts, sha256 per stream
    config.json            the MemoryConfig the store was built with
    episodes.jsonl         EpisodeRecord
    entities.jsonl         EntityRecord
    relation_edges.jsonl   RelationEdge
    episodic_edges.jsonl   EpisodicEdge (redundant with entity episode_idx; checked on load)
    categories.jsonl       CategoryRecord (active hierarchy generation)
    category_edges.jsonl   CategoryEdge

Records are written sorted by id with fixed zip timestamps, so saving the same
store twice yields identical bytes. Indexes are not stored; they are rebuilt
from the records on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Callable, Iterable

from .config import MemoryConfig
from .embedding import Embedder
from .model import (
    CategoryEdge,
    EpisodicEdge,
    InvariantError,
    category_from_json,
    edge_from_json,
    entity_from_json,
    episode_from_json,
    record_to_json,
)
from .store import HierarchyGeneration, MemoryStore

SCHEMA_VERSION = 1
STREAMS = (
    "episodes.jsonl",
    "entities.jsonl",
    "relation_edges.jsonl",
    "episodic_edges.jsonl",
    "categories.jsonl",
    "category_edges.jsonl",
)
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class SnapshotError(Exception):
    """Snapshot could not be read; ``stream``/``line``/``offset`` locate the fault."""

    def __init__(self, message: str, stream: str | None = None,
                 line: int | None = None, offset: int | None = None):
        self.stream = stream
        self.line = line
        self.offset = offset
        where = []
        if stream:
            where.append(stream)
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def _jsonl(rows: Iterable[dict[str, Any]]) -> bytes:
    return b"".join(
        json.dumps(r, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
        for r in rows
    )


def snapshot_streams(store: MemoryStore) -> dict[str, bytes]:
    gen = store.hierarchy
    return {
        "episodes.jsonl": _jsonl(record_to_json(store.episodes[k]) for k in sorted(store.episodes)),
        "entities.jsonl": _jsonl(record_to_json(store.entities[k]) for k in sorted(store.entities)),
        "relation_edges.jsonl": _jsonl(record_to_json(store.edges[k]) for k in sorted(store.edges)),
        "episodic_edges.jsonl": _jsonl(record_to_json(e) for e in store.episodic_edges()),
        "categories.jsonl": _jsonl(record_to_json(gen.categories[k]) for k in sorted(gen.categories)),
        "category_edges.jsonl": _jsonl(record_to_json(e) for e in gen.edges),
    }


def save_snapshot(store: MemoryStore, path: str | os.PathLike) -> Path:
    """Write ``store`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    streams = snapshot_streams(store)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "embedding_dim": store.config.embedding_dim,
        "next_seq": store.next_seq,
        "hierarchy_generation": store.hierarchy.number,
        "counts": {name: data.count(b"\n") for name, data in streams.items()},
        "sha256": {name: hashlib.sha256(data).hexdigest() for name, data in streams.items()},
    }
    files = {
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
        "config.json": json.dumps(store.config.to_json(), indent=2, sort_keys=True).encode("utf-8"),
        **streams,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in files.items():
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _parse_stream(name: str, data: bytes, parse: Callable[[dict], Any]) -> list[Any]:
    out = []
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        if raw.strip():
            try:
                out.append(parse(json.loads(raw)))
            except (ValueError, KeyError, TypeError) as exc:
                raise SnapshotError(f"bad record: {exc}", stream=name, line=lineno, offset=offset) from exc
        offset += len(raw) + 1
    return out


def load_snapshot(path: str | os.PathLike, embedder: Embedder | None = None,
                  config: MemoryConfig | None = None) -> MemoryStore:
    """Read a snapshot into a fresh store. Nothing is returned on any error."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            files = {name: zf.read(name) for name in zf.namelist()}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError, EOFError, zipfile.LargeZipFile) as exc:
        size = path.stat().st_size if path.exists() else None
        raise SnapshotError(f"unreadable snapshot container: {exc}", offset=size) from exc
    except Exception as exc:  # zlib errors on truncated members
        raise SnapshotError(f"corrupt snapshot member: {exc}") from exc

    if "manifest.json" not in files:
        raise SnapshotError("manifest.json missing")
    try:
        manifest = json.loads(files["manifest.json"])
        stored_config = MemoryConfig.from_json(json.loads(files.get("config.json", b"{}")))
    except ValueError as exc:
        raise SnapshotError(f"bad manifest or config: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SnapshotError(f"unsupported schema version {manifest.get('schema_version')}")
    for name in STREAMS:
        if name not in files:
            raise SnapshotError("stream missing", stream=name)
        digest = hashlib.sha256(files[name]).hexdigest()
        if digest != manifest["sha256"].get(name):
            raise SnapshotError("checksum mismatch", stream=name)

    config = config or stored_config
    if config.embedding_dim != manifest["embedding_dim"]:
        raise SnapshotError(
            f"snapshot embedding dim {manifest['embedding_dim']} != configured {config.embedding_dim}")
    store = MemoryStore(config, embedder)
    try:
        for ep in _parse_stream("episodes.jsonl", files["episodes.jsonl"], episode_from_json):
            store.upsert_node(ep)
        for ent in _parse_stream("entities.jsonl", files["entities.jsonl"], entity_from_json):
            store.upsert_node(ent)
        for edge in _parse_stream("relation_edges.jsonl", files["relation_edges.jsonl"], edge_from_json):
            store.upsert_edge(edge)
        episodic = _parse_stream("episodic_edges.jsonl", files["episodic_edges.jsonl"],
                                 lambda d: EpisodicEdge(d["entity"], d["episode"]))
        if sorted(episodic) != store.episodic_edges():
            raise SnapshotError("episodic edges disagree with entity episode_idx",
                                stream="episodic_edges.jsonl")
        cats = _parse_stream("categories.jsonl", files["categories.jsonl"], category_from_json)
        cedges = _parse_stream("category_edges.jsonl", files["category_edges.jsonl"],
                               lambda d: CategoryEdge(d["parent"], d["child"]))
    except InvariantError as exc:
        raise SnapshotError(f"record violates invariants: {exc}") from exc
    problems = store.hierarchy_problems(cats, cedges)
    if problems:
        raise SnapshotError(f"hierarchy violates invariants: {'; '.join(problems[:5])}",
                            stream="category_edges.jsonl")
    store._hierarchy = HierarchyGeneration.build(int(manifest.get("hierarchy_generation", 0)), cats, cedges)
    store._next_seq = int(manifest["next_seq"])
    return store

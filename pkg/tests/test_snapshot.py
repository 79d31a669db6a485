from __future__ import annotations

import hashlib
import io
import json
import zipfile

import pytest

from dualmem.config import MemoryConfig
from dualmem.snapshot import SnapshotError, load_snapshot, save_snapshot, snapshot_streams


def test_round_trip_is_lossless_and_byte_stable(three_sessions, tmp_path):
    store, *_ = three_sessions
    p1 = save_snapshot(store, tmp_path / "a.zip")
    loaded = load_snapshot(p1)
    p2 = save_snapshot(loaded, tmp_path / "b.zip")
    assert p1.read_bytes() == p2.read_bytes()
    assert snapshot_streams(loaded) == snapshot_streams(store)
    assert loaded.next_seq == store.next_seq
    assert loaded.hierarchy.number == store.hierarchy.number
    assert loaded.audit().ok


def test_loaded_store_rebuilds_indexes(three_sessions, tmp_path):
    store, *_ = three_sessions
    loaded = load_snapshot(save_snapshot(store, tmp_path / "s.zip"))
    assert loaded.lexical.search("beagle", "entity", 3) == store.lexical.search("beagle", "entity", 3)
    q = store.embedder.embed("parrot")
    assert loaded.vectors.search(q, "edge", 5) == store.vectors.search(q, "edge", 5)


def test_truncated_container_is_reported(three_sessions, tmp_path):
    store, *_ = three_sessions
    path = save_snapshot(store, tmp_path / "s.zip")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(SnapshotError) as err:
        load_snapshot(path)
    assert "unreadable" in str(err.value) or "corrupt" in str(err.value)


def _rewrite(path, name, mutate):
    with zipfile.ZipFile(path) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    files[name] = mutate(files[name])
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for n, b in files.items():
            zf.writestr(n, b)
    path.write_bytes(buf.getvalue())


def test_checksum_mismatch_names_the_stream(three_sessions, tmp_path):
    store, *_ = three_sessions
    path = save_snapshot(store, tmp_path / "s.zip")
    _rewrite(path, "entities.jsonl", lambda b: b.replace(b"Biscuit", b"Biscuix", 1))
    with pytest.raises(SnapshotError) as err:
        load_snapshot(path)
    assert err.value.stream == "entities.jsonl"


def test_bad_record_reports_line(three_sessions, tmp_path):
    store, *_ = three_sessions
    path = save_snapshot(store, tmp_path / "s.zip")

    with zipfile.ZipFile(path) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    lines = files["episodes.jsonl"].split(b"\n")
    lines[2] = b'{"id": "ep-x"}'
    files["episodes.jsonl"] = b"\n".join(lines)
    manifest = json.loads(files["manifest.json"])
    manifest["sha256"]["episodes.jsonl"] = hashlib.sha256(files["episodes.jsonl"]).hexdigest()
    files["manifest.json"] = json.dumps(manifest).encode()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for n, b in files.items():
            zf.writestr(n, b)
    path.write_bytes(buf.getvalue())
    with pytest.raises(SnapshotError) as err:
        load_snapshot(path)
    assert err.value.stream == "episodes.jsonl" and err.value.line == 3


def test_dimension_mismatch_is_rejected(three_sessions, tmp_path):
    store, *_ = three_sessions
    path = save_snapshot(store, tmp_path / "s.zip")
    with pytest.raises(SnapshotError):
        load_snapshot(path, config=MemoryConfig(embedding_dim=store.config.embedding_dim * 2))


def test_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_snapshot(tmp_path / "nope.zip")


def test_failed_save_leaves_previous_snapshot(three_sessions, tmp_path, monkeypatch):
    store, *_ = three_sessions
    path = save_snapshot(store, tmp_path / "s.zip")
    before = path.read_bytes()
    import dualmem.snapshot as snap

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(snap.os, "replace", boom)
    with pytest.raises(OSError):
        save_snapshot(store, path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["s.zip"]

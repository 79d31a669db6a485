from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import DATA  # noqa: E402

from dualmem.config import load_config  # noqa: E402
from dualmem.hierarchy import build_hierarchy  # noqa: E402
from dualmem.ingest import ingest, read_corpus  # noqa: E402
from dualmem.oracle import make_oracle  # noqa: E402
from dualmem.store import MemoryStore  # noqa: E402


def open_fixture(stem: str, corpus: str | None = None, hierarchy: bool = True):
    """Ingest a bundled corpus with its scripted oracle; optionally build the hierarchy."""
    config, settings = load_config(DATA / f"{stem}_config.json")
    store = MemoryStore(config)
    oracle = make_oracle(settings)
    corpus_path = DATA / (corpus or f"{stem}_corpus.jsonl")
    report = ingest(store, oracle, read_corpus(corpus_path))
    if hierarchy:
        build_hierarchy(store, oracle)
    return store, oracle, report


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def three_sessions():
    return open_fixture("three_sessions", "three_sessions.jsonl")


@pytest.fixture
def fig1():
    return open_fixture("fig1")


@pytest.fixture
def fig3():
    return open_fixture("fig3")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""Store-wide settings and the JSON config file that carries them.

A config document is a flat JSON object whose keys are ``MemoryConfig`` field
names plus an optional ``"oracle"`` object (see ``OracleSettings``). Unknown
keys are rejected so typos surface early.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .model import DEFAULT_EMBEDDING_DIM


@dataclass(frozen=True)
class MemoryConfig:
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    top_k: int = 10
    compression_ratio: int = 3
    max_layers: int = 5
    categorize_batch_size: int = 50
    rrf_c: int = 0
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    entity_name_boost: int = 2
    candidate_depth_factor: int = 2
    recent_window: int = 4
    dedup_candidates: int = 5
    edge_dedup_threshold: float = 0.9
    allow_reflexive_edges: bool = False
    chunking: str = "turn"
    parallelism: int = 4

    def __post_init__(self) -> None:
        problems = []
        if self.embedding_dim <= 0:
            problems.append("embedding_dim must be positive")
        if self.top_k <= 0:
            problems.append("top_k must be positive")
        if self.compression_ratio < 2:
            problems.append("compression_ratio must be >= 2")
        if self.max_layers < 1:
            problems.append("max_layers must be >= 1")
        if self.rrf_c < 0:
            problems.append("rrf_c must be non-negative")
        if self.chunking not in ("turn", "exchange"):
            problems.append("chunking must be 'turn' or 'exchange'")
        if self.parallelism < 1:
            problems.append("parallelism must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "MemoryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides: Any) -> "MemoryConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class OracleSettings:
    """Which concept oracle and embedder to use.

    ``kind`` is ``"scripted"`` (deterministic fixture, ``fixture`` is a JSON
    path resolved relative to the config file) or ``"remote"`` (chat
    completions endpoint). The API key is read only from the environment
    variable named by ``api_key_env``.
    """

    kind: str = "scripted"
    fixture: str | None = None
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "DUALMEM_ORACLE_KEY"
    temperature: float = 0.0
    embedder: str = "hash"
    reranker: str = "lexical"
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_json(cls, data: dict[str, Any], base_dir: Path | None = None) -> "OracleSettings":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown oracle keys: {sorted(unknown)}")
        settings = cls(**data)
        if settings.fixture and base_dir is not None and not Path(settings.fixture).is_absolute():
            settings = replace(settings, fixture=str(base_dir / settings.fixture))
        return settings

    def with_env(self) -> "OracleSettings":
        env = os.environ
        return replace(
            self,
            base_url=env.get("DUALMEM_ORACLE_URL", self.base_url),
            model=env.get("DUALMEM_ORACLE_MODEL", self.model),
        )


def load_config(path: str | os.PathLike | None) -> tuple[MemoryConfig, OracleSettings]:
    if path is None:
        return MemoryConfig(), OracleSettings().with_env()
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    oracle_data = data.pop("oracle", {})
    if "DUALMEM_PARALLELISM" in os.environ:
        data["parallelism"] = int(os.environ["DUALMEM_PARALLELISM"])
    return (MemoryConfig.from_json(data),
            OracleSettings.from_json(oracle_data, base_dir=path.parent).with_env())

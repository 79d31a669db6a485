"""Question-answering evaluation with a 0/1 judge, aggregated per category."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .oracle.base import ConceptOracle, OracleError
from .retrieval import Reranker, SearchBudget, answer_query
from .store import MemoryStore

logger = logging.getLogger(__name__)

ADVERSARIAL = "adversarial"
LOCOMO_CATEGORIES = {1: "multi-hop", 2: "temporal", 3: "open-domain", 4: "single-hop", 5: ADVERSARIAL}
SCORE_DIGITS = 6


@dataclass(frozen=True)
class EvalCase:
    question: str
    gold_answer: str
    category: str
    session: str | None = None
    case_id: str = ""

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("eval case question is empty")
        if not str(self.gold_answer).strip():
            raise ValueError(f"eval case {self.question!r} has an empty gold answer")


def _case_from_json(d: dict[str, Any], fallback_id: str) -> EvalCase:
    gold = d.get("gold_answer", d.get("answer"))
    if gold is None:
        raise ValueError("missing gold_answer")
    return EvalCase(
        question=str(d["question"]),
        gold_answer=str(gold),
        category=str(d.get("category", "uncategorized")),
        session=d.get("session"),
        case_id=str(d.get("id", fallback_id)),
    )


def locomo_cases(data: Any) -> list[EvalCase]:
    samples = data if isinstance(data, list) else [data]
    out = []
    for s_idx, sample in enumerate(samples):
        sample_id = str(sample.get("sample_id", s_idx))
        for q_idx, qa in enumerate(sample.get("qa", [])):
            category = LOCOMO_CATEGORIES.get(int(qa.get("category", 0)), str(qa.get("category")))
            gold = qa.get("answer", qa.get("adversarial_answer"))
            if gold is None or not str(gold).strip():
                logger.warning("skipping %s question %d without an answer", sample_id, q_idx)
                continue
            out.append(EvalCase(str(qa["question"]), str(gold), category, sample_id, f"{sample_id}-{q_idx}"))
    return out


def load_cases(path: str | Path) -> list[EvalCase]:
    """Line-JSON ``{question, gold_answer|answer, category, session?, id?}`` or LoCoMo JSON."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        return locomo_cases(json.loads(text))
    cases = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            cases.append(_case_from_json(json.loads(line), f"q{lineno:04d}"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return cases


@dataclass
class CaseRecord:
    case: EvalCase
    prediction: str
    score: int
    error: str | None = None
    evidence: dict[str, list[str]] = field(default_factory=dict)
    system2_status: str | None = None
    paths: list[list[str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.case.case_id,
            "question": self.case.question,
            "category": self.case.category,
            "gold_answer": self.case.gold_answer,
            "prediction": self.prediction,
            "score": self.score,
            "error": self.error,
            "evidence": self.evidence,
            "system2_status": self.system2_status,
            "paths": self.paths,
        }


@dataclass
class EvalReport:
    records: list[CaseRecord]
    excluded: int
    config: dict[str, Any]

    def categories(self) -> dict[str, dict[str, Any]]:
        table: dict[str, dict[str, Any]] = {}
        for r in self.records:
            row = table.setdefault(r.case.category, {"count": 0, "correct": 0})
            row["count"] += 1
            row["correct"] += r.score
        for row in table.values():
            row["score"] = round(100.0 * row["correct"] / row["count"], SCORE_DIGITS)
        return dict(sorted(table.items()))

    @property
    def overall(self) -> float:
        if not self.records:
            return 0.0
        return round(100.0 * sum(r.score for r in self.records) / len(self.records), SCORE_DIGITS)

    def to_json(self) -> dict[str, Any]:
        return {
            "overall": self.overall,
            "count": len(self.records),
            "excluded": self.excluded,
            "categories": self.categories(),
            "config": self.config,
            "cases": [r.to_json() for r in self.records],
        }

    def table(self) -> str:
        rows = [("category", "count", "correct", "score")]
        for name, row in self.categories().items():
            rows.append((name, str(row["count"]), str(row["correct"]), f"{row['score']:.2f}"))
        rows.append(("overall", str(len(self.records)), str(sum(r.score for r in self.records)),
                     f"{self.overall:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def run_eval(store: MemoryStore, oracle: ConceptOracle, cases: Sequence[EvalCase], k: int | None = None,
             route: str = "both", exclude_adversarial: bool = True, parallelism: int | None = None,
             reranker: Reranker | None = None) -> EvalReport:
    """Answer and judge every case; the store is only read."""
    budget = SearchBudget(k or store.config.top_k)
    kept = [c for c in cases if not (exclude_adversarial and c.category == ADVERSARIAL)]

    def one(case: EvalCase) -> CaseRecord:
        try:
            result = answer_query(store, oracle, case.question, budget, route, reranker)
        except OracleError as exc:
            logger.warning("case %s failed: %s", case.case_id, exc)
            return CaseRecord(case, "", 0, error=f"{type(exc).__name__}: {exc}")
        try:
            score = oracle.judge(case.question, case.gold_answer, result.answer)
            error = None
        except OracleError as exc:
            score, error = 0, f"judge {type(exc).__name__}: {exc}"
        s2 = result.search.system2
        return CaseRecord(
            case, result.answer, score, error,
            evidence={kind: [it.id for it in items] for kind, items in result.evidence.items()},
            system2_status=s2.status if s2 else None,
            paths=s2.paths if s2 else [],
        )

    workers = max(1, parallelism or store.config.parallelism)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(one, kept))
    config = {
        "k": budget.k,
        "route": route,
        "exclude_adversarial": exclude_adversarial,
        # parallelism changes nothing in the output, so keep it out of the echo
        "memory": {k: v for k, v in store.config.to_json().items() if k != "parallelism"},
    }
    return EvalReport(records=records, excluded=len(cases) - len(kept), config=config)

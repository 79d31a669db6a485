"""Command-line entry point: ingest, build-hierarchy, ask, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 oracle unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import MemoryConfig, OracleSettings, load_config
from .embedding import Embedder, HashEmbedder, RemoteEmbedder
from .evaluation import EvalReport, load_cases, run_eval
from .hierarchy import BuildConfig, HierarchyBuilder
from .ingest import CorpusError, IngestAborted, Ingestor, read_corpus
from .model import InvariantError, record_to_json
from .oracle import ConceptOracle, OracleError, make_oracle
from .retrieval import ROUTES, HierarchyAbsent, SearchBudget, answer_query, make_reranker
from .snapshot import SnapshotError, load_snapshot, save_snapshot
from .store import MemoryStore, NotFoundError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ORACLE = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 means data error here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(data: Any, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(data), encoding="utf-8")
    return path


# -- shared setup ---------------------------------------------------------------


def _settings(args) -> tuple[MemoryConfig, OracleSettings, bool]:
    try:
        config, settings = load_config(args.config)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {exc.filename}") from exc
    except ValueError as exc:
        raise DataError(f"bad config: {exc}") from exc
    return config, settings, args.config is not None


def _embedder(settings: OracleSettings, dim: int) -> Embedder:
    if settings.embedder == "hash":
        return HashEmbedder(dim)
    if settings.embedder == "remote":
        return RemoteEmbedder.from_env(dim)
    raise DataError(f"unknown embedder {settings.embedder!r}")


def _open_store(args, must_exist: bool = True) -> tuple[MemoryStore, OracleSettings]:
    config, settings, explicit = _settings(args)
    path = Path(args.store)
    if not path.exists():
        if must_exist:
            raise DataError(f"snapshot not found: {path}")
        return MemoryStore(config, _embedder(settings, config.embedding_dim)), settings
    store = load_snapshot(path, _embedder(settings, config.embedding_dim), config if explicit else None)
    return store, settings


def _oracle(settings: OracleSettings) -> ConceptOracle:
    return make_oracle(settings)


# -- verbs ------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    store, settings = _open_store(args, must_exist=False)
    oracle = _oracle(settings)
    messages = read_corpus(args.corpus)
    try:
        report = Ingestor(store, oracle).ingest(messages)
    except IngestAborted as exc:
        save_snapshot(store, args.store)
        payload = {**exc.report.to_json(), "aborted": str(exc.cause)}
        _emit(args, payload, f"ingestion aborted: {exc.cause}")
        return EXIT_ORACLE
    save_snapshot(store, args.store)
    payload = report.to_json()
    text = "\n".join(f"{k:18} {v}" for k, v in payload.items() if k != "warnings")
    _emit(args, payload, text)
    return EXIT_OK


def cmd_build_hierarchy(args) -> int:
    store, settings = _open_store(args)
    oracle = _oracle(settings)
    build_cfg = BuildConfig.from_memory_config(store.config, compression_ratio=args.n,
                                               max_layers=args.max_layers, batch_size=args.batch_size)
    report = HierarchyBuilder(store, oracle, build_cfg).build()
    save_snapshot(store, args.out or args.store)
    payload = report.to_json()
    lines = [f"layer 0: {len(store.entities)} entities"]
    lines += [f"layer {lr.layer}: {lr.categories} categories ({lr.promoted} promoted)" for lr in report.layers]
    lines.append(f"termination: {report.termination}")
    _emit(args, payload, "\n".join(lines))
    if args.out_dir:
        from .plotting import plot_hierarchy, write_hierarchy_csv

        out = Path(args.out_dir)
        write_json(payload, out / "hierarchy_report.json")
        write_hierarchy_csv(report, out / "hierarchy_layers.csv")
        plot_hierarchy(report, out / "hierarchy_layers.png", len(store.entities))
    return EXIT_OK


def cmd_ask(args) -> int:
    store, settings = _open_store(args)
    oracle = _oracle(settings)
    if args.route == "s2" and store.hierarchy.empty:
        raise HierarchyAbsent("hierarchy absent: run build-hierarchy first or use --route s1/both")
    reranker = make_reranker(settings.reranker, settings.extra.get("rerank_url"),
                             settings.extra.get("rerank_model"))
    budget = SearchBudget(args.k or store.config.top_k)
    result = answer_query(store, oracle, args.question, budget, args.route, reranker)
    s2 = result.search.system2
    if args.route == "s2" and s2 is not None and s2.status == "empty-selection":
        raise DataError("System-2 selected nothing for this question (try --route both)")
    payload = {**result.to_json(), "evidence": {k: [it.to_json() for it in v] for k, v in result.evidence.items()}}
    lines = [f"answer: {result.answer}"]
    if s2 is not None and s2.status != "ok" and args.route == "both":
        lines.append(f"note: System-2 {s2.status}; evidence from System-1 only")
    for kind, items in result.evidence.items():
        lines.append(f"{kind} ({len(items)}):")
        for it in items:
            lines.append(f"  {it.score:.4f} [{','.join(sorted(it.route))}] {it.display_text}")
    if s2 is not None and s2.paths:
        lines.append("paths:")
        lines += [f"  {' -> '.join(p)}" for p in s2.paths]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    store, settings = _open_store(args)
    oracle = _oracle(settings)
    try:
        cases = load_cases(args.cases)
    except FileNotFoundError as exc:
        raise DataError(f"cases file not found: {exc.filename}") from exc
    reranker = make_reranker(settings.reranker, settings.extra.get("rerank_url"),
                             settings.extra.get("rerank_model"))
    report: EvalReport = run_eval(store, oracle, cases, k=args.k, route=args.route,
                                  exclude_adversarial=not args.include_adversarial,
                                  reranker=reranker)
    payload = report.to_json()
    _emit(args, payload, report.table())
    if args.out_dir:
        from .plotting import plot_eval, write_eval_csv

        out = Path(args.out_dir)
        write_json(payload, out / "eval_report.json")
        write_eval_csv(report, out / "eval_scores.csv")
        plot_eval(report, out / "eval_scores.png")
    return EXIT_OK


def _entity_dump(store: MemoryStore, name: str) -> dict[str, Any]:
    ent = store.find_entity(name)
    if ent is None:
        raise NotFoundError(f"no entity named {name!r}")
    record = {k: v for k, v in record_to_json(ent).items() if not k.endswith("embedding")}
    edges = sorted(store.edges_of(ent.id), key=lambda pair: pair[0].id)
    return {
        "entity": record,
        "edges": [{"id": e.id, "fact": e.fact, "other": o.name, "other_id": o.id} for e, o in edges],
        "episodes": [{"id": ep.id, "content": ep.content}
                     for ep in sorted(store.episodes_of(ent.id), key=lambda ep: ep.id)],
        "parents": [store.hierarchy.categories[p].name for p in store.hierarchy.parents_of(ent.id)],
    }


def find_path(store: MemoryStore, names: Sequence[str]) -> list[str] | None:
    """Ids of a parent-to-child chain whose node names match ``names``, if any."""
    gen = store.hierarchy

    def matches(node_id: str, name: str) -> bool:
        node = gen.categories.get(node_id) or store.entities.get(node_id)
        return node is not None and node.name.casefold() == name.casefold()

    def walk(node_id: str, rest: Sequence[str]) -> list[str] | None:
        if not rest:
            return [node_id]
        for child in gen.children_of(node_id):
            if matches(child, rest[0]):
                tail = walk(child, rest[1:])
                if tail:
                    return [node_id] + tail
        return None

    if not names:
        return None
    starts = sorted(c for c in list(gen.categories) + list(store.entities) if matches(c, names[0]))
    for start in starts:
        found = walk(start, names[1:])
        if found:
            return found
    return None


def cmd_inspect(args) -> int:
    store, _ = _open_store(args)
    if args.what == "stats":
        payload = store.stats()
        _emit(args, payload, "\n".join(f"{k:22} {v}" for k, v in payload.items()))
        return EXIT_OK
    if args.what == "entity":
        payload = _entity_dump(store, " ".join(args.names))
        lines = [f"{payload['entity']['name']}: {payload['entity']['summary']}"]
        lines += [f"  fact: {e['fact']} (with {e['other']})" for e in payload["edges"]]
        lines += [f"  episode {ep['id']}: {ep['content']}" for ep in payload["episodes"]]
        _emit(args, payload, "\n".join(lines))
        return EXIT_OK
    ids = find_path(store, args.names)
    payload = {"path": list(args.names), "exists": ids is not None, "ids": ids or []}
    _emit(args, payload, f"{' -> '.join(args.names)}: {'exists' if ids else 'not found'}")
    return EXIT_OK if ids else EXIT_DATA


def _emit(args, payload: dict[str, Any], text: str) -> None:
    if getattr(args, "report", None):
        write_json(payload, args.report)
    if args.json:
        sys.stdout.write(dump_json(payload))
    else:
        sys.stdout.write(text.rstrip() + "\n")


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (memory settings plus an 'oracle' object)")
    common.add_argument("--json", action="store_true", help="print the JSON report instead of a table")
    common.add_argument("--report", help="also write the JSON report to this path")

    parser = _Parser(prog="dualmem", description="Dual-route conversational memory engine.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="ingest a corpus into a snapshot")
    p.add_argument("corpus")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-hierarchy", parents=[common], help="rebuild the category hierarchy")
    p.add_argument("--store", required=True)
    p.add_argument("--n", type=int, help="compression ratio (minimum children per category)")
    p.add_argument("--max-layers", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", help="write the new snapshot here instead of in place")
    p.add_argument("--out-dir", help="directory for JSON, CSV and PNG outputs")
    p.set_defaults(func=cmd_build_hierarchy)

    p = sub.add_parser("ask", parents=[common], help="answer one question from memory")
    p.add_argument("question")
    p.add_argument("--store", required=True)
    p.add_argument("--route", choices=ROUTES, default="both")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval", parents=[common], help="answer and judge a case file")
    p.add_argument("--store", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--route", choices=ROUTES, default="both")
    p.add_argument("--k", type=int)
    p.add_argument("--include-adversarial", action="store_true")
    p.add_argument("--out-dir", help="directory for JSON, CSV and PNG outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="look inside a snapshot")
    p.add_argument("what", choices=("stats", "entity", "path"))
    p.add_argument("names", nargs="*")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help; keep main() returning a code
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "k", None) is not None and args.k <= 0:
            parser.error("--k must be positive")
        if args.command == "inspect" and args.what != "stats" and not args.names:
            parser.error(f"inspect {args.what} needs at least one name")
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except OracleError as exc:
        print(f"error: oracle unavailable: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (DataError, CorpusError, SnapshotError, InvariantError, HierarchyAbsent,
            NotFoundError, FileNotFoundError, ValueError) as exc:
        message = exc.args[0] if isinstance(exc, NotFoundError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

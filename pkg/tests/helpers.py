"""Independent reference implementations and fixture builders for the tests.

Nothing here imports the ranking code under test: the BM25, fusion and
cosine references are written from the textbook definitions so they can act
as oracles.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from datetime import datetime, timedelta, timezone
from pathlib import Path

DATA = Path(__file__).parent / "data"


# -- reference rankers -------------------------------------------------------------


def textbook_bm25(docs: dict[str, list[str]], query: list[str], k1: float = 1.2,
                  b: float = 0.75) -> dict[str, float]:
    """Okapi BM25 with the non-negative idf ln(1 + (N - df + 0.5) / (df + 0.5)).

    Each query token counts once per occurrence in the query.
    """
    n = len(docs)
    if n == 0:
        return {}
    avgdl = sum(len(d) for d in docs.values()) / n
    df = Counter()
    for tokens in docs.values():
        for t in set(tokens):
            df[t] += 1
    scores = {}
    for doc_id, tokens in docs.items():
        tf = Counter(tokens)
        total = 0.0
        for q in query:
            f = tf.get(q, 0)
            if f == 0:
                continue
            idf = math.log(1.0 + (n - df[q] + 0.5) / (df[q] + 0.5))
            total += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(tokens) / avgdl))
        scores[doc_id] = total
    return scores


def brute_rrf(lists: list[list[str]], c: int) -> list[tuple[str, float]]:
    items = {x for lst in lists for x in lst}
    rows = []
    for x in items:
        score = 0.0
        best = math.inf
        for lst in lists:
            if x in lst:
                r = lst.index(x) + 1
                score += 1.0 / (c + r)
                best = min(best, r)
        rows.append((-score, best, x))
    rows.sort()
    return [(x, -s) for s, _, x in rows]


def full_scan_cosine(rows: dict[str, list[float]], query: list[float], limit: int,
                     digits: int = 12) -> list[tuple[str, float]]:
    """Cosine by full scan; scores equal to ``digits`` places count as ties, broken by id."""
    qn = math.sqrt(sum(v * v for v in query))
    scored = []
    for doc_id, vec in rows.items():
        vn = math.sqrt(sum(v * v for v in vec))
        dot = sum(a * b for a, b in zip(vec, query))
        cos = dot / (vn * qn) if vn and qn else 0.0
        scored.append((doc_id, round(cos, digits)))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:limit]


def coverage_score(query: str, text: str) -> float:
    """Reference for the lexical reranker: share of query tokens present in text."""
    import re

    q = re.findall(r"[a-z0-9]+", query.lower())
    present = set(re.findall(r"[a-z0-9]+", text.lower()))
    if not q:
        return 0.0
    return sum(1 for t in q if t in present) / len(q)


# -- fixture builders -----------------------------------------------------------------


def load_json(name: str):
    return json.loads((DATA / name).read_text(encoding="utf-8"))


CITIES = ["Detroit", "Chicago", "Austin", "Seattle", "Boston", "Denver",
          "Phoenix", "Atlanta", "Portland", "Miami", "Dallas", "Nashville"]
LANDMARKS = ["Space Needle", "Golden Gate Bridge", "Gateway Arch", "Hoover Dam"]
ACTIVITIES = ["pottery", "chess", "karate", "baking"]
N_DISTRACTORS = 30
N_SESSIONS = 40


def enumerative_fixture() -> tuple[list[dict], dict, dict]:
    """Corpus, oracle fixture and ground truth for the enumerative-recall check.

    Twelve city entities are each mentioned in a single session, scattered
    over 40 sessions. Their summaries are long, so BM25 length normalization
    and cosine dilution push them down the System-1 lists, while thirty short
    "trip log" entities echo the question words and crowd the top of the
    vector list. The hierarchy groups the cities under one category.
    """
    rng = random.Random(7)
    start = datetime(2023, 1, 2, 9, 0, tzinfo=timezone.utc)
    city_sessions = sorted(rng.sample(range(N_SESSIONS), len(CITIES)))
    logs = [f"Trip Log {i:02d}" for i in range(1, N_DISTRACTORS + 1)]
    messages = []
    log_iter = iter(logs)
    city_iter = iter(CITIES)
    landmark_iter = iter(LANDMARKS)
    activity_iter = iter(ACTIVITIES)
    for s in range(N_SESSIONS):
        t0 = start + timedelta(days=7 * s)
        texts = []
        if s in city_sessions:
            city = next(city_iter)
            texts.append(f"Dave: Last weekend I spent three days in {city} for work.")
        for _ in range(1 if s in city_sessions else 2):
            log = next(log_iter, None)
            if log is not None:
                texts.append(f"Dave: I wrote {log} on the train.")
        if s % 10 == 3:
            texts.append(f"Dave: I finally saw the {next(landmark_iter)}.")
        if s % 10 == 6:
            texts.append(f"Dave: I started a {next(activity_iter)} class.")
        for j, text in enumerate(texts):
            speaker, _, body = text.partition(": ")
            messages.append({"speaker": speaker, "text": body,
                             "timestamp": (t0 + timedelta(minutes=j)).strftime("%Y-%m-%dT%H:%M:%SZ"),
                             "session_id": f"trip-{s:02d}"})
    descriptions = {}
    for city in CITIES:
        descriptions[city] = (
            f"{city} is one of the cities which Dave did travel to; he stayed for a long weekend, "
            "walked around downtown, met several colleagues from the regional office, tried the "
            "local food and took many photos before flying home again")
    for log in logs:
        descriptions[log] = "which trips did Dave travel to"
    for landmark in LANDMARKS:
        descriptions[landmark] = f"{landmark}, a famous landmark Dave saw on his travels"
    for activity in ACTIVITIES:
        descriptions[activity] = f"{activity}, a hobby class Dave started this year"
    fixture = {
        "lexicon": CITIES + logs + LANDMARKS + ACTIVITIES,
        "descriptions": descriptions,
        "cooccurrence": False,
        "taxonomy": {
            **{c: ["Geographical Locations"] for c in CITIES},
            **{lg: ["Travel Records"] for lg in logs},
            **{lm: ["Landmarks"] for lm in LANDMARKS},
            **{a: ["Hobbies"] for a in ACTIVITIES},
            "Geographical Locations": ["Geography"],
            "Landmarks": ["Geography"],
            "Travel Records": ["Geography"],
        },
        "selection": {
            "cities": ["Geography", "Geographical Locations"],
            "landmarks": ["Geography", "Landmarks"],
            "hobby": ["Hobbies"],
        },
        "expand_all": ["Geographical Locations", "Landmarks", "Hobbies"],
    }
    truth = {
        "Which cities did Dave travel to?": CITIES,
        "Which landmarks did Dave see on his travels?": LANDMARKS,
        "Which hobby classes did Dave start?": ACTIVITIES,
    }
    return messages, fixture, truth


# -- randomized hierarchy stores ----------------------------------------------------------


def random_hierarchy_case(seed: int) -> dict:
    """A random base graph plus a scripted taxonomy exercising the awkward cases.

    Entities get one or two parents, group sizes are uneven so some groups
    fall under any n, a slice of the orphans is rescued on the retry pass, and
    a first-person node sometimes shows up to trigger the Speaker rule.
    """
    rng = random.Random(seed)
    n_entities = rng.randint(20, 500)
    n = rng.choice([2, 3, 5])
    names = [f"Item {i:03d}" for i in range(n_entities)]
    if rng.random() < 0.3:
        names[rng.randrange(n_entities)] = "User"
    taxonomy: dict[str, list[str]] = {}
    retry: dict[str, list[str]] = {}
    layer_names = names
    for layer in range(1, 6):
        width = max(1, len(layer_names) // rng.randint(1, 7))
        groups = [f"Layer{layer} Group {j:03d}" for j in range(width)]
        # skewed sizes: a few big groups and a long tail of small ones
        weights = [1.0 / (j + 1) for j in range(width)]
        for child in layer_names:
            parents = rng.choices(groups, weights=weights, k=rng.choice([1, 1, 1, 2]))
            taxonomy[child] = list(dict.fromkeys(parents))
            if rng.random() < 0.25:
                retry[child] = [groups[0]] if rng.random() < 0.5 else [f"Layer{layer} Rescue"]
        layer_names = groups + [f"Layer{layer} Rescue"]
    return {
        "seed": seed,
        "n": n,
        "names": names,
        "max_layers": rng.randint(1, 5),
        "batch_size": rng.choice([50, rng.randint(8, 120)]),
        "fixture": {"taxonomy": taxonomy, "retry_taxonomy": retry},
        "episodes": rng.randint(0, 5),
        "episode_links": [rng.sample(range(5), rng.randint(0, 2)) for _ in names],
    }


def hierarchy_violations(gen, entity_ids: set[str], n: int) -> list[str]:
    """Check a persisted hierarchy generation from scratch."""
    out = []
    cats = gen.categories
    layer_of = {e: 0 for e in entity_ids}
    layer_of.update({c.id: c.layer for c in cats.values()})
    children: dict[str, set[str]] = {}
    parents: dict[str, set[str]] = {}
    for e in gen.edges:
        if e.parent not in cats or e.child not in layer_of:
            out.append(f"dangling edge {e}")
            continue
        if layer_of[e.parent] != layer_of[e.child] + 1:
            out.append(f"edge {e} skips layers")
        children.setdefault(e.parent, set()).add(e.child)
        parents.setdefault(e.child, set()).add(e.parent)
    for c in cats.values():
        if not c.promoted and len(children.get(c.id, ())) < n:
            out.append(f"{c.id} has {len(children.get(c.id, ()))} < {n} children")
        if c.promoted and not children.get(c.id):
            out.append(f"{c.id} is childless")
    counts = Counter(layer_of.values())
    top = max(counts)
    for i in range(2, top + 1):
        if counts[i] > counts[i - 1]:
            out.append(f"layer {i} has {counts[i]} nodes > {counts[i - 1]} below")
    if cats:
        for node, layer in layer_of.items():
            if layer < top and not parents.get(node):
                out.append(f"{node} at layer {layer} has no parent")
    # acyclicity by iterative DFS over child links
    state: dict[str, int] = {}
    for root in cats:
        if state.get(root):
            continue
        stack = [(root, iter(children.get(root, ())))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                out.append(f"cycle through {nxt}")
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(children.get(nxt, ()))))
    return out

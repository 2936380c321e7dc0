"""Dataset parsing, the canonical JSONL question format, and synthetic
template-question generation for tests and desk-scale experiments.

Release layouts drift between dataset versions, so the parsers are
adapters pinned to one vendored layout: a directory holding ``kb.txt``
(tab-separated triples) plus one or more ``*.txt`` question files whose
lines read ``question<TAB>answer1[/answer2...][<TAB>path]`` with the
path as ``entity#relation#entity...``.  Parsed counts are cross-checked
against the published statistics and mismatches warn rather than fail.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kgstore import KnowledgeGraph, load_triples, normalize_surface

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Unusable dataset release."""


@dataclass
class QaExample:
    id: str
    question: str
    answers: list[str]
    core_entities: list[str] | None = None
    path: list[list[str]] | None = None  # diagnostic gold path, never supervision

    def __post_init__(self):
        if not self.answers:
            raise ValueError(f"example {self.id}: no answers")
        if self.path is not None and self.path:
            final_tail = self.path[-1][2]
            norm_answers = {normalize_surface(a) for a in self.answers}
            if normalize_surface(final_tail) not in norm_answers:
                raise ValueError(f"example {self.id}: path endpoint not among answers")


@dataclass
class Dataset:
    name: str
    graph: KnowledgeGraph | None
    examples: list[QaExample]
    tags: set[str] = field(default_factory=set)
    flagged_ids: set[str] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.examples)


def resolve_answer_ids(graph: KnowledgeGraph, names: list[str]) -> list[int]:
    """Entity ids for answer surface forms; unresolvable names are dropped."""
    index = {normalize_surface(name): i for i, name in enumerate(graph.entities)}
    out = []
    for name in names:
        eid = index.get(normalize_surface(name))
        if eid is not None:
            out.append(eid)
    return out


# ---------------------------------------------------------------------------
# release parsing
# ---------------------------------------------------------------------------

# published statistics used as soft cross-checks after parsing
REFERENCE_STATS = {
    "PQ": {"entities": {"2H": 1057, "3H": 1837}, "relations": {"2H": 14, "3H": 14},
           "triples": {"2H": 1211, "3H": 2839},
           "questions": {"2H": 1908, "3H": 5198}},
    "PQL": {"entities": {"2H": 5027, "3H": 6497}, "relations": {"2H": 364, "3H": 412},
            "triples": {"2H": 4247, "3H": 5597},
            "questions": {"2H": 1594, "3H": 1031}},
    "WC": {"entities": 1128, "relations": 11, "triples": 6482,
           "questions": {"1H": 6482, "2H": 1472, "M": 7954, "C": 2208}},
}

_TAG_MARKERS = ["50", "3h", "2h", "1h", "mix", "conj"]
_TAG_NAMES = {"3h": "3H", "2h": "2H", "1h": "1H", "mix": "M", "conj": "C", "50": "-50"}


def _infer_tag(stem: str) -> str | None:
    stem = stem.lower()
    for marker in _TAG_MARKERS:
        if marker in stem:
            return _TAG_NAMES[marker]
    return None


def _parse_path(raw: str) -> list[list[str]] | None:
    parts = raw.split("#")
    if len(parts) < 3 or len(parts) % 2 == 0:
        return None
    return [[parts[i], parts[i + 1], parts[i + 2]] for i in range(0, len(parts) - 2, 2)]


def _parse_release(directory, name: str) -> Dataset:
    directory = Path(directory)
    kb = directory / "kb.txt"
    if not kb.exists():
        raise DataFormatError(f"{directory}: missing kb.txt")
    graph = load_triples(kb)
    question_files = sorted(p for p in directory.glob("*.txt") if p.name != "kb.txt")
    if not question_files:
        raise DataFormatError(f"{directory}: no question files")

    entity_index = {normalize_surface(e): i for i, e in enumerate(graph.entities)}
    examples: list[QaExample] = []
    flagged: set[str] = set()
    tags: set[str] = set()
    for qfile in question_files:
        tag = _infer_tag(qfile.stem)
        if tag:
            tags.add(tag)
        for lineno, line in enumerate(qfile.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise DataFormatError(
                    f"{qfile}: line {lineno}: expected question<TAB>answers[<TAB>path]")
            question = fields[0].strip()
            answers = [a.strip() for a in fields[1].split("/") if a.strip()]
            path = _parse_path(fields[2]) if len(fields) > 2 and fields[2].strip() else None
            qid = f"{qfile.stem}-{lineno}"
            if path is not None:
                norm_answers = {normalize_surface(a) for a in answers}
                if normalize_surface(path[-1][2]) not in norm_answers:
                    logger.warning("%s: line %d: path endpoint not among answers; "
                                   "dropping path", qfile, lineno)
                    path = None
            example = QaExample(qid, question, answers, path=path)
            if not any(normalize_surface(a) in entity_index for a in answers):
                flagged.add(qid)
                logger.warning("%s: line %d: no answer resolves to a KG entity", qfile, lineno)
            examples.append(example)
    if not examples:
        raise DataFormatError(f"{directory}: no questions parsed")
    if len(flagged) > 0.01 * len(examples):
        raise DataFormatError(
            f"{directory}: {len(flagged)}/{len(examples)} examples have unresolvable "
            "answers (limit 1%)")
    ds = Dataset(name, graph, examples, tags, flagged)
    _check_reference_stats(ds)
    return ds


def _check_reference_stats(ds: Dataset) -> None:
    ref = REFERENCE_STATS.get(ds.name)
    if ref is None:
        return
    tag = next(iter(ds.tags), None)

    def expected(key):
        val = ref.get(key)
        return val.get(tag) if isinstance(val, dict) else val

    checks = [("entities", len(ds.graph.entities)), ("relations", len(ds.graph.relations)),
              ("triples", len(ds.graph.triples)), ("questions", len(ds.examples))]
    for key, got in checks:
        want = expected(key)
        if want is not None and got != want:
            logger.warning("%s[%s]: %s count %d differs from published %d",
                           ds.name, tag, key, got, want)


def parse_pathquestion(directory) -> Dataset:
    """Parse a vendored PathQuestion-style release directory."""
    name = "PQL" if "pql" in Path(directory).name.lower() else "PQ"
    return _parse_release(directory, name)


def parse_worldcup(directory) -> Dataset:
    """Parse a vendored WorldCup2014-style release directory."""
    return _parse_release(directory, "WC")


# ---------------------------------------------------------------------------
# canonical format
# ---------------------------------------------------------------------------

def export_canonical(ds: Dataset, path) -> None:
    """One JSON object per line, fixed field order; round-trip lossless."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ds.examples:
            record = {"id": ex.id, "question": ex.question, "answers": ex.answers}
            if ex.core_entities is not None:
                record["core_entities"] = ex.core_entities
            if ex.path is not None:
                record["path"] = ex.path
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_canonical(path, graph: KnowledgeGraph | None = None,
                   name: str | None = None) -> Dataset:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
            examples.append(QaExample(
                record["id"], record["question"], record["answers"],
                record.get("core_entities"), record.get("path")))
    return Dataset(name or Path(path).stem, graph, examples)


# ---------------------------------------------------------------------------
# synthetic template datasets
# ---------------------------------------------------------------------------

def _relation_path_endpoints(graph: KnowledgeGraph, start: int,
                             relations: list[int]) -> set[int]:
    """All entities reachable from start following the exact relation sequence."""
    frontier = {start}
    for rel in relations:
        frontier = {graph.triples[tid].tail
                    for e in frontier for tid in graph.by_head[e]
                    if graph.triples[tid].relation == rel}
        if not frontier:
            break
    return frontier


def _bfs_within(graph: KnowledgeGraph, start: int, target: int, hops: int) -> bool:
    """Independent reachability check by plain edge-list scanning."""
    reachable = {start}
    for _ in range(hops):
        grown = set(reachable)
        for t in graph.triples:
            if t.head in reachable:
                grown.add(t.tail)
        if target in grown:
            return True
        reachable = grown
    return target in reachable


def generate_synthetic(entities: int, relations: int, hops: int, count: int,
                       seed: int, out_degree: tuple[int, int] = (2, 4),
                       unique_answers: bool = False,
                       name: str | None = None) -> Dataset:
    """Random KG plus template questions "what is the <e> 's <r1> 's ... ?".

    Every entity gets a uniform out-degree in ``out_degree`` (lower bound
    >= 2).  Question answers are all endpoints of the sampled relation
    sequence; with unique_answers only single-endpoint questions are kept.
    Each gold answer is verified reachable by an independent BFS before
    the dataset is emitted.
    """
    if out_degree[0] < 2:
        raise ValueError("out-degree lower bound must be >= 2")
    if hops < 1:
        raise ValueError("hops must be >= 1")
    rng = np.random.default_rng(seed)
    entity_names = [f"e{i}" for i in range(entities)]
    relation_names = [f"rel{i}" for i in range(relations)]
    rows = []
    seen = set()
    for h in range(entities):
        degree = int(rng.integers(out_degree[0], out_degree[1] + 1))
        attempts = 0
        placed = 0
        while placed < degree and attempts < 50 * degree:
            attempts += 1
            r = int(rng.integers(relations))
            t = int(rng.integers(entities))
            if t == h or (h, r, t) in seen:
                continue
            seen.add((h, r, t))
            rows.append((entity_names[h], relation_names[r], entity_names[t]))
            placed += 1
    graph = KnowledgeGraph.from_surface_triples(rows)

    examples: list[QaExample] = []
    used: set[tuple[int, tuple[int, ...]]] = set()
    attempts = 0
    max_attempts = 200 * count
    while len(examples) < count and attempts < max_attempts:
        attempts += 1
        start = int(rng.integers(entities))
        current = start
        rel_seq: list[int] = []
        walk: list[list[str]] = []
        dead_end = False
        for _ in range(hops):
            outgoing = graph.by_head[current]
            if not outgoing:
                dead_end = True
                break
            tid = outgoing[int(rng.integers(len(outgoing)))]
            t = graph.triples[tid]
            rel_seq.append(t.relation)
            walk.append([graph.entities[t.head], graph.relations[t.relation],
                         graph.entities[t.tail]])
            current = t.tail
        if dead_end:
            continue
        key = (start, tuple(rel_seq))
        if key in used:
            continue
        endpoints = _relation_path_endpoints(graph, start, rel_seq)
        if unique_answers and len(endpoints) != 1:
            continue
        used.add(key)
        rel_text = " 's ".join(graph.relations[r] for r in rel_seq)
        question = f"what is the {graph.entities[start]} 's {rel_text} ?"
        answers = sorted(graph.entities[e] for e in endpoints)
        for answer in answers:
            if not _bfs_within(graph, start, graph.entity_id(answer), hops):
                raise AssertionError(
                    f"generated answer {answer!r} not reachable from {graph.entities[start]!r}")
        examples.append(QaExample(
            f"syn-{len(examples)}", question, answers,
            core_entities=[graph.entities[start]], path=walk))
    if len(examples) < count:
        raise ValueError(
            f"could only generate {len(examples)} of {count} distinct questions; "
            "increase entities or out-degree")
    return Dataset(name or f"synthetic-{hops}h", graph, examples, {f"{hops}H"})

"""Knowledge graph storage: triple loading, adjacency indexes, K-hop
candidate extraction, per-triple head/tail context sets, and seeded
triple removal for incomplete-KG experiments.

The graph is immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATE_CAP = 2048


def normalize_surface(name: str) -> str:
    """Case-insensitive entity matching form; spaces and underscores unified."""
    return name.lower().replace(" ", "_")


class KgFormatError(ValueError):
    """Malformed triple file."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """Immutable triple store with entity/relation vocabularies and
    head/tail adjacency indexes."""

    def __init__(self, entities: Sequence[str], relations: Sequence[str],
                 triples: Sequence[Triple]):
        self.entities = list(entities)
        self.relations = list(relations)
        self.triples = list(triples)
        self.entity_to_id = {name: i for i, name in enumerate(self.entities)}
        self.relation_to_id = {name: i for i, name in enumerate(self.relations)}
        if len(self.entity_to_id) != len(self.entities):
            raise ValueError("duplicate entity surface forms")
        if len(self.relation_to_id) != len(self.relations):
            raise ValueError("duplicate relation surface forms")
        seen = set()
        for t in self.triples:
            key = (t.head, t.relation, t.tail)
            if key in seen:
                raise ValueError(f"duplicate triple {key}")
            seen.add(key)
            if not (0 <= t.head < len(self.entities)
                    and 0 <= t.tail < len(self.entities)
                    and 0 <= t.relation < len(self.relations)):
                raise ValueError(f"triple {key} references unknown vocabulary id")
        self.by_head: list[list[int]] = [[] for _ in self.entities]
        self.by_tail: list[list[int]] = [[] for _ in self.entities]
        for tid, t in enumerate(self.triples):
            self.by_head[t.head].append(tid)
            self.by_tail[t.tail].append(tid)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_surface_triples(cls, rows: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        """Build from (head, relation, tail) surface strings, deduplicating
        and keeping first-seen vocabulary order."""
        entities: dict[str, int] = {}
        relations: dict[str, int] = {}
        triples: list[Triple] = []
        seen: set[tuple[int, int, int]] = set()
        for head, rel, tail in rows:
            h = entities.setdefault(head, len(entities))
            r = relations.setdefault(rel, len(relations))
            t = entities.setdefault(tail, len(entities))
            key = (h, r, t)
            if key in seen:
                continue
            seen.add(key)
            triples.append(Triple(h, r, t))
        return cls(list(entities), list(relations), triples)

    def entity_id(self, surface: str) -> int:
        return self.entity_to_id[surface]

    def __len__(self) -> int:
        return len(self.triples)


def load_triples(path) -> KnowledgeGraph:
    """Load a UTF-8 "head<TAB>relation<TAB>tail" file.

    Lines starting with '#' are ignored; duplicate triples are dropped;
    vocabularies keep insertion order. Raises KgFormatError with the
    1-based line number for a wrong field count.
    """
    rows: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise KgFormatError(
                    f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            rows.append((fields[0], fields[1], fields[2]))
    return KnowledgeGraph.from_surface_triples(rows)


def save_triples(graph: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in graph.triples:
            fh.write(f"{graph.entities[t.head]}\t{graph.relations[t.relation]}\t{graph.entities[t.tail]}\n")


def k_hop_candidates(graph: KnowledgeGraph, core: Iterable[int], k: int,
                     cap: int = DEFAULT_CANDIDATE_CAP) -> tuple[list[int], list[int]]:
    """Candidate triples and answers for a K-hop neighborhood of the core.

    Entities reachable from the core within K-1 undirected hops are
    collected breadth-first; every triple incident to one of them joins
    the candidate list T_C (nearest-first, deduplicated, truncated at
    ``cap`` with a warning). The candidate answers A_C are the entities
    appearing in the kept triples, in first-appearance order.
    """
    core = list(core)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not core:
        raise ValueError("core entity set is empty")
    for e in core:
        if not 0 <= e < len(graph.entities):
            raise ValueError(f"unknown entity id {e}")

    visited = dict.fromkeys(core)  # insertion-ordered set
    frontier = list(visited)
    for _ in range(k - 1):
        next_frontier = []
        for e in frontier:
            for tid in graph.by_head[e]:
                other = graph.triples[tid].tail
                if other not in visited:
                    visited[other] = None
                    next_frontier.append(other)
            for tid in graph.by_tail[e]:
                other = graph.triples[tid].head
                if other not in visited:
                    visited[other] = None
                    next_frontier.append(other)
        frontier = next_frontier

    triple_ids: list[int] = []
    seen_triples: set[int] = set()
    truncated = False
    for e in visited:
        for tid in graph.by_head[e] + graph.by_tail[e]:
            if tid in seen_triples:
                continue
            if len(triple_ids) >= cap:
                truncated = True
                break
            seen_triples.add(tid)
            triple_ids.append(tid)
        if truncated:
            break
    if truncated:
        logger.warning("candidate set truncated at cap=%d for core=%s", cap, core)

    answers: list[int] = []
    seen_entities: set[int] = set()
    for tid in triple_ids:
        t = graph.triples[tid]
        for e in (t.head, t.tail):
            if e not in seen_entities:
                seen_entities.add(e)
                answers.append(e)
    return triple_ids, answers


def head_context(graph: KnowledgeGraph, triple_id: int) -> list[int]:
    """All triples sharing this triple's head entity, itself included."""
    return list(graph.by_head[graph.triples[triple_id].head])


def tail_context(graph: KnowledgeGraph, triple_id: int) -> list[int]:
    """All triples sharing this triple's tail entity, itself included."""
    return list(graph.by_tail[graph.triples[triple_id].tail])


def drop_triples(graph: KnowledgeGraph, fraction: float, seed: int) -> KnowledgeGraph:
    """Remove floor(fraction * |triples|) uniformly sampled triples.

    Vocabularies are kept unchanged, so entities may become isolated.
    The same seed always removes the same set.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    n_remove = int(fraction * len(graph.triples))
    if n_remove == 0:
        return KnowledgeGraph(graph.entities, graph.relations, graph.triples)
    rng = np.random.default_rng(seed)
    removed = set(rng.choice(len(graph.triples), size=n_remove, replace=False).tolist())
    kept = [t for i, t in enumerate(graph.triples) if i not in removed]
    return KnowledgeGraph(graph.entities, graph.relations, kept)

"""Question-aware key-value memory reasoning over KG candidates.

Candidate triples from the K-hop neighborhood of the linked core
entities fill the memory: each key encodes head+relation projected into
the hidden space, each value the tail.  Reasoning runs Z hops of key
addressing, value reading and query updating; the query update
re-attends over the question tokens so the focus can move hop by hop.
The final read vector scores every candidate entity through its value
projection.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kgembed import KgEmbeddingParams
from .kgstore import (
    DEFAULT_CANDIDATE_CAP,
    KnowledgeGraph,
    k_hop_candidates,
    normalize_surface,
)
from .qencoder import GruParams, QuestionEncoding, TokenVocab, encode, tokenize

logger = logging.getLogger(__name__)


class EntityLinker:
    """Greedy longest-span dictionary matcher from token spans to entities."""

    def __init__(self, graph: KnowledgeGraph):
        self.index: dict[str, int] = {}
        self.max_span = 1
        for eid, name in enumerate(graph.entities):
            key = normalize_surface(name)
            if key in self.index:
                logger.debug("entity surface collision on %r; keeping first", key)
                continue
            self.index[key] = eid
            self.max_span = max(self.max_span, key.count("_") + 1)

    def link(self, tokens: Sequence[str]) -> list[int]:
        """All non-overlapping matches, longest span winning at each start."""
        found: list[int] = []
        seen: set[int] = set()
        i = 0
        while i < len(tokens):
            matched = False
            for span in range(min(self.max_span, len(tokens) - i), 0, -1):
                eid = self.index.get("_".join(tokens[i:i + span]))
                if eid is not None:
                    if eid not in seen:
                        seen.add(eid)
                        found.append(eid)
                    i += span
                    matched = True
                    break
            if not matched:
                i += 1
        return found


def link_entities(tokens: Sequence[str], graph: KnowledgeGraph) -> list[int]:
    return EntityLinker(graph).link(tokens)


# ---------------------------------------------------------------------------
# memory slots
# ---------------------------------------------------------------------------

@dataclass
class MemorySlots:
    triple_ids: list[int]
    keys: Tensor            # N x d_hid
    values: Tensor          # N x d_hid
    candidates: list[int]   # A_C entity ids, discovery order
    slot_mask: np.ndarray   # per-slot keep bits; all-keep at eval

    def __post_init__(self):
        self.candidate_position = {e: i for i, e in enumerate(self.candidates)}

    @property
    def size(self) -> int:
        return len(self.triple_ids)


def sample_slot_mask(n: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Per-slot keep bits; a draw that would drop everything keeps everything
    (attention over zero slots is undefined)."""
    mask = rng.random(n) >= drop_prob
    if not mask.any():
        mask[:] = True
    return mask


def build_slots(core: Sequence[int], graph: KnowledgeGraph,
                kge: KgEmbeddingParams, W_k: Tensor, W_v: Tensor, k: int,
                cap: int = DEFAULT_CANDIDATE_CAP, drop_prob: float = 0.0,
                rng: np.random.Generator | None = None) -> MemorySlots | None:
    """Fill key/value memory from the K-hop candidates of the core entities.

    Returns None when the neighborhood is empty (the question is then
    scored as unanswerable).  With drop_prob > 0 a training-time mask
    drops that fraction of slots; masked slots never receive attention.
    """
    triple_ids, candidates = k_hop_candidates(graph, core, k, cap=cap)
    if not triple_ids:
        return None
    heads = np.array([graph.triples[i].head for i in triple_ids], dtype=np.intp)
    rels = np.array([graph.triples[i].relation for i in triple_ids], dtype=np.intp)
    tails = np.array([graph.triples[i].tail for i in triple_ids], dtype=np.intp)
    in_rel_space = ad.add(ad.matmul(ad.row_select(kge.E_ent, heads),
                                    ad.transpose(kge.W_e2r)),
                          ad.row_select(kge.E_rel, rels))
    keys = ad.matmul(in_rel_space, ad.transpose(W_k))
    values = ad.matmul(ad.row_select(kge.E_ent, tails), ad.transpose(W_v))
    if drop_prob > 0.0:
        if rng is None:
            raise ValueError("slot dropout requires an rng")
        mask = sample_slot_mask(len(triple_ids), drop_prob, rng)
    else:
        mask = np.ones(len(triple_ids), dtype=bool)
    return MemorySlots(triple_ids, keys, values, candidates, mask)


# ---------------------------------------------------------------------------
# reasoning steps
# ---------------------------------------------------------------------------

def init_query(enc: QuestionEncoding) -> Tensor:
    """Self-attention pooling of the token states against the integrated
    question vector."""
    attention = ad.softmax(ad.matmul(enc.H, enc.h_x))
    return ad.matmul(attention, enc.H)


def key_address(q: Tensor, slots: MemorySlots) -> Tensor:
    """Relevance distribution over kept key slots; masked slots get 0."""
    return ad.masked_softmax(ad.matmul(slots.keys, q), slots.slot_mask)


def value_read(p_qk: Tensor, slots: MemorySlots) -> Tensor:
    """Attention-weighted sum of the value slots."""
    return ad.matmul(p_qk, slots.values)


def query_update(o: Tensor, enc: QuestionEncoding) -> tuple[Tensor, Tensor]:
    """Re-attend over question tokens from the read vector; the next query
    adds the attended token summary to the read vector."""
    p_vq = ad.softmax(ad.matmul(enc.H, o))
    q_next = ad.add(o, ad.matmul(p_vq, enc.H))
    return p_vq, q_next


def answer_scores(o_z: Tensor, slots: MemorySlots, kge: KgEmbeddingParams,
                  W_v: Tensor) -> Tensor:
    """Logit per candidate entity: the read vector against the candidate's
    value projection.  Realizes the per-question answer matrix with shared
    parameters, since the candidate count varies by question."""
    cand = ad.row_select(kge.E_ent, np.asarray(slots.candidates, dtype=np.intp))
    projected = ad.matmul(cand, ad.transpose(W_v))
    return ad.matmul(projected, o_z)


def predict(o_z: Tensor, slots: MemorySlots, kge: KgEmbeddingParams,
            W_v: Tensor) -> Tensor:
    """Probability distribution over the candidate answers."""
    if not slots.candidates:
        raise ValueError("predict requires at least one candidate")
    return ad.softmax(answer_scores(o_z, slots, kge, W_v))


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

@dataclass
class HopTrace:
    p_qk: np.ndarray
    p_vq: np.ndarray | None
    q: np.ndarray
    o: np.ndarray


@dataclass
class ReasoningTrace:
    tokens: list[str]
    slot_labels: list[str]
    hops: list[HopTrace] = field(default_factory=list)

    def question_argmax(self, hop: int) -> int:
        p = self.hops[hop].p_vq
        if p is None:
            raise ValueError("trace has no question attention (ablated run)")
        return int(np.argmax(p))

    def to_csv(self, fh) -> None:
        """Rows "hop,kind,index,label,weight" for heatmap plotting."""
        writer = csv.writer(fh)
        writer.writerow(["hop", "kind", "index", "label", "weight"])
        for z, hop in enumerate(self.hops, start=1):
            if hop.p_vq is not None:
                for i, (label, w) in enumerate(zip(self.tokens, hop.p_vq)):
                    writer.writerow([z, "question_token", i, label, f"{w:.10g}"])
            for i, (label, w) in enumerate(zip(self.slot_labels, hop.p_qk)):
                writer.writerow([z, "memory_slot", i, label, f"{w:.10g}"])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    tokens: list[str]
    core: list[int]
    slots: MemorySlots | None = None
    scores: Tensor | None = None
    trace: ReasoningTrace | None = None

    @property
    def answerable(self) -> bool:
        return self.scores is not None

    def probabilities(self) -> np.ndarray:
        s = self.scores.data
        e = np.exp(s - s.max())
        return e / e.sum()

    def ranking(self) -> list[tuple[int, float]]:
        """Candidates by probability, descending; ties keep discovery order."""
        p = self.probabilities()
        order = np.argsort(-p, kind="stable")
        return [(self.slots.candidates[i], float(p[i])) for i in order]

    def top_entity(self) -> int | None:
        return self.ranking()[0][0] if self.answerable else None


class Qa2mnNetwork:
    """The trained artifact: KG embedding + question encoder + memory hops."""

    def __init__(self, graph: KnowledgeGraph, vocab: TokenVocab,
                 kge: KgEmbeddingParams, gru: GruParams, W_k: Tensor,
                 W_v: Tensor, k_hops: int = 3, z_hops: int = 3,
                 candidate_cap: int = DEFAULT_CANDIDATE_CAP,
                 slot_dropout: float = 0.1, question_aware: bool = True):
        self.graph = graph
        self.vocab = vocab
        self.kge = kge
        self.gru = gru
        self.W_k = W_k
        self.W_v = W_v
        self.k_hops = k_hops
        self.z_hops = z_hops
        self.candidate_cap = candidate_cap
        self.slot_dropout = slot_dropout
        self.question_aware = question_aware
        self.linker = EntityLinker(graph)

    @classmethod
    def build(cls, graph: KnowledgeGraph, vocab: TokenVocab, config,
              rng: np.random.Generator) -> "Qa2mnNetwork":
        kge = KgEmbeddingParams.initialize(len(graph.entities), len(graph.relations),
                                           config.d_ent, rng)
        gru = GruParams(len(vocab), config.d_emb, config.d_hid, rng)
        bound_k = 1.0 / np.sqrt(config.d_rel)
        W_k = Tensor(rng.uniform(-bound_k, bound_k, size=(config.d_hid, config.d_rel)),
                     requires_grad=True)
        W_v = Tensor(rng.uniform(-bound_k, bound_k, size=(config.d_hid, config.d_ent)),
                     requires_grad=True)
        return cls(graph, vocab, kge, gru, W_k, W_v,
                   k_hops=config.k_hops, z_hops=config.z_hops,
                   candidate_cap=config.n_max, slot_dropout=config.slot_dropout,
                   question_aware=not config.no_question_aware)

    def params(self) -> dict[str, Tensor]:
        out = dict(self.kge.tensors())
        out.update(self.gru.tensors())
        out["mem.W_k"] = self.W_k
        out["mem.W_v"] = self.W_v
        return out

    def load_tensors(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {arrays[name].shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arrays[name].astype(np.float64).copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params().items()}

    def _slot_label(self, tid: int) -> str:
        t = self.graph.triples[tid]
        return (f"{self.graph.entities[t.head]} {self.graph.relations[t.relation]} "
                f"{self.graph.entities[t.tail]}")

    def forward(self, question: str, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        """Tokenize, link, hash memory, reason for Z hops, score candidates.

        Questions with no linked core entity or an empty candidate
        neighborhood come back unanswerable.
        """
        tokens = tokenize(question)
        core = self.linker.link(tokens)
        if not core:
            return ForwardResult(tokens, core)
        slots = build_slots(core, self.graph, self.kge, self.W_k, self.W_v,
                            self.k_hops, cap=self.candidate_cap,
                            drop_prob=self.slot_dropout if train else 0.0,
                            rng=rng)
        if slots is None:
            return ForwardResult(tokens, core)

        enc = encode(self.vocab.ids(tokens), self.gru, tokens)
        trace = ReasoningTrace(tokens, [self._slot_label(i) for i in slots.triple_ids])
        q = init_query(enc)
        o = None
        for _ in range(self.z_hops):
            p_qk = key_address(q, slots)
            o = value_read(p_qk, slots)
            if self.question_aware:
                p_vq, q = query_update(o, enc)
                trace.hops.append(HopTrace(p_qk.data.copy(), p_vq.data.copy(),
                                           q.data.copy(), o.data.copy()))
            else:
                q = ad.add(o, q)
                trace.hops.append(HopTrace(p_qk.data.copy(), None,
                                           q.data.copy(), o.data.copy()))
        scores = answer_scores(o, slots, self.kge, self.W_v)
        return ForwardResult(tokens, core, slots, scores, trace)

    def loss(self, result: ForwardResult, gold_ids: Sequence[int]) -> Tensor | None:
        """Cross-entropy against the gold candidates; None when no gold
        entity appears among the candidates."""
        if not result.answerable:
            return None
        positions = [result.slots.candidate_position[g] for g in gold_ids
                     if g in result.slots.candidate_position]
        if not positions:
            return None
        return ad.cross_entropy_with_logits(result.scores, positions)

    def answer(self, question: str, top_k: int = 5) -> tuple[list[tuple[str, float]], ReasoningTrace | None]:
        """Top-k candidate surface forms with probabilities, plus the trace."""
        result = self.forward(question)
        if not result.answerable:
            return [], result.trace
        named = [(self.graph.entities[eid], p) for eid, p in result.ranking()[:top_k]]
        return named, result.trace

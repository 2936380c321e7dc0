"""Graph-context translational KG embedding.

A triple (h, r, t) is scored by the translational distance
``||W.E_h + E_r - W.E_t||`` where W projects entities into relation
space.  Two context distances are added: the head of a triple should
match the average head implied by all triples sharing that head
(``E_t - W^-1.E_r`` per context triple), and symmetrically for tails
(``E_h + W^-1.E_r``).  Pretraining minimizes the sum of the three
distances plus a margin-ranking hinge against corrupted triples, with
entity rows projected back onto the unit ball after every step.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .kgstore import KnowledgeGraph, Triple
from .optim import Adam, clip_gradients

logger = logging.getLogger(__name__)

INVERSE_REG = 1e-6  # epsilon factor: solve (W + eps*I) with eps = 1e-6*trace(W)/d


class KgEmbeddingParams:
    """Entity matrix, relation matrix and the entity-to-relation projection."""

    def __init__(self, E_ent: Tensor, E_rel: Tensor, W_e2r: Tensor):
        d_ent = E_ent.data.shape[1]
        d_rel = E_rel.data.shape[1]
        if d_ent != d_rel:
            raise ValueError(f"entity/relation dims must match, got {d_ent} vs {d_rel}")
        if W_e2r.data.shape != (d_rel, d_ent):
            raise ValueError(f"projection must be {d_rel}x{d_ent}, got {W_e2r.data.shape}")
        self.E_ent = E_ent
        self.E_rel = E_rel
        self.W_e2r = W_e2r

    @classmethod
    def initialize(cls, n_entities: int, n_relations: int, dim: int,
                   rng: np.random.Generator) -> "KgEmbeddingParams":
        """Uniform +-6/sqrt(d) embeddings (entity rows normalized onto the
        unit ball) and a near-identity projection."""
        bound = 6.0 / np.sqrt(dim)
        ent = rng.uniform(-bound, bound, size=(n_entities, dim))
        norms = np.sqrt((ent * ent).sum(axis=1, keepdims=True))
        ent /= np.maximum(norms, 1.0)
        rel = rng.uniform(-bound, bound, size=(n_relations, dim))
        proj = np.eye(dim) + rng.normal(scale=0.01, size=(dim, dim))
        return cls(Tensor(ent, requires_grad=True),
                   Tensor(rel, requires_grad=True),
                   Tensor(proj, requires_grad=True))

    @property
    def dim(self) -> int:
        return self.E_ent.data.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"kge.E_ent": self.E_ent, "kge.E_rel": self.E_rel,
                "kge.W_e2r": self.W_e2r}

    def project_entity_norms(self) -> None:
        """Rescale entity rows with L2 norm above 1 back onto the unit ball."""
        data = self.E_ent.data
        norms = np.sqrt((data * data).sum(axis=1, keepdims=True))
        np.divide(data, np.maximum(norms, 1.0), out=data)

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.W_e2r.data))


class ContextCache:
    """Per-triple head/tail context triple-id arrays plus component arrays.

    Contexts are static for a fixed graph, so they are computed once.
    """

    def __init__(self, graph: KnowledgeGraph):
        self.graph = graph
        self.heads = np.array([t.head for t in graph.triples], dtype=np.intp)
        self.rels = np.array([t.relation for t in graph.triples], dtype=np.intp)
        self.tails = np.array([t.tail for t in graph.triples], dtype=np.intp)
        self.head_ctx = [np.array(graph.by_head[t.head], dtype=np.intp)
                         for t in graph.triples]
        self.tail_ctx = [np.array(graph.by_tail[t.tail], dtype=np.intp)
                         for t in graph.triples]


def regularized_inverse(W: Tensor) -> Tensor:
    """Differentiable inverse of (W + eps*I) with eps = 1e-6 * trace(W) / d."""
    d = W.data.shape[0]
    eps = ad.scalar_multiply(ad.trace(W), INVERSE_REG / d)
    return ad.inverse(ad.add_scaled_identity(W, eps))


# ---------------------------------------------------------------------------
# per-triple distance terms
# ---------------------------------------------------------------------------

def translational_distance(triple: Triple, params: KgEmbeddingParams) -> Tensor:
    """||W.E_h + E_r - W.E_t||."""
    h = ad.row(params.E_ent, triple.head)
    r = ad.row(params.E_rel, triple.relation)
    t = ad.row(params.E_ent, triple.tail)
    wh = ad.matmul(params.W_e2r, h)
    wt = ad.matmul(params.W_e2r, t)
    return ad.l2_norm(ad.subtract(ad.add(wh, r), wt))


def _implied_heads(ctx: np.ndarray, params: KgEmbeddingParams,
                   cache: ContextCache, W_inv: Tensor) -> Tensor:
    """Rows E_t - W^-1.E_r for every context triple."""
    tails = ad.row_select(params.E_ent, cache.tails[ctx])
    rels = ad.row_select(params.E_rel, cache.rels[ctx])
    return ad.subtract(tails, ad.matmul(rels, ad.transpose(W_inv)))


def _implied_tails(ctx: np.ndarray, params: KgEmbeddingParams,
                   cache: ContextCache, W_inv: Tensor) -> Tensor:
    """Rows E_h + W^-1.E_r for every context triple."""
    heads = ad.row_select(params.E_ent, cache.heads[ctx])
    rels = ad.row_select(params.E_rel, cache.rels[ctx])
    return ad.add(heads, ad.matmul(rels, ad.transpose(W_inv)))


def head_context_embedding(triple_id: int, params: KgEmbeddingParams,
                           cache: ContextCache) -> Tensor:
    """Mean implied head over the triples sharing this triple's head."""
    ctx = cache.head_ctx[triple_id]
    return ad.mean_rows(_implied_heads(ctx, params, cache, regularized_inverse(params.W_e2r)))


def head_context_distance(triple_id: int, params: KgEmbeddingParams,
                          cache: ContextCache) -> Tensor:
    head = ad.row(params.E_ent, cache.heads[triple_id])
    return ad.l2_norm(ad.subtract(head, head_context_embedding(triple_id, params, cache)))


def tail_context_embedding(triple_id: int, params: KgEmbeddingParams,
                           cache: ContextCache) -> Tensor:
    """Mean implied tail over the triples sharing this triple's tail."""
    ctx = cache.tail_ctx[triple_id]
    return ad.mean_rows(_implied_tails(ctx, params, cache, regularized_inverse(params.W_e2r)))


def tail_context_distance(triple_id: int, params: KgEmbeddingParams,
                          cache: ContextCache) -> Tensor:
    tail = ad.row(params.E_ent, cache.tails[triple_id])
    return ad.l2_norm(ad.subtract(tail, tail_context_embedding(triple_id, params, cache)))


# ---------------------------------------------------------------------------
# batched loss
# ---------------------------------------------------------------------------

def _averaging_matrix(ctx_lists: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Constant (B x total) matrix averaging concatenated context rows per batch item."""
    total = sum(len(c) for c in ctx_lists)
    avg = np.zeros((len(ctx_lists), total))
    flat = np.empty(total, dtype=np.intp)
    pos = 0
    for i, ctx in enumerate(ctx_lists):
        n = len(ctx)
        avg[i, pos:pos + n] = 1.0 / n
        flat[pos:pos + n] = ctx
        pos += n
    return avg, flat


def _batch_translational(heads, rels, tails, params: KgEmbeddingParams) -> Tensor:
    Wt = ad.transpose(params.W_e2r)
    eh = ad.matmul(ad.row_select(params.E_ent, heads), Wt)
    er = ad.row_select(params.E_rel, rels)
    et = ad.matmul(ad.row_select(params.E_ent, tails), Wt)
    return ad.row_norms(ad.subtract(ad.add(eh, er), et))


def corrupt_triples(heads: np.ndarray, tails: np.ndarray, n_entities: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One corruption per positive: replace head or tail (fair coin) with a
    uniformly drawn different entity."""
    neg_heads = heads.copy()
    neg_tails = tails.copy()
    for i in range(len(heads)):
        corrupt_head = bool(rng.integers(2))
        original = heads[i] if corrupt_head else tails[i]
        candidate = int(rng.integers(n_entities))
        while candidate == original:
            candidate = int(rng.integers(n_entities))
        if corrupt_head:
            neg_heads[i] = candidate
        else:
            neg_tails[i] = candidate
    return neg_heads, neg_tails


def kge_loss(batch_ids: Sequence[int], params: KgEmbeddingParams,
             cache: ContextCache, negatives_per_positive: int = 1,
             margin: float = 1.0, rng: np.random.Generator | None = None) -> Tensor:
    """Sum over the batch of d_t + d_Ch + d_Ct, plus a margin-ranking hinge
    against corrupted triples when negatives_per_positive > 0.

    With margin=0 and no negatives this is exactly the bare objective,
    whose global minimum is the all-zero parameter point; the hinge and
    the entity-norm projection exist to rule that solution out.
    """
    batch = np.asarray(batch_ids, dtype=np.intp)
    if batch.size == 0:
        raise ValueError("empty batch")
    heads, rels, tails = cache.heads[batch], cache.rels[batch], cache.tails[batch]

    d_t = _batch_translational(heads, rels, tails, params)

    W_inv = regularized_inverse(params.W_e2r)
    avg_h, flat_h = _averaging_matrix([cache.head_ctx[i] for i in batch])
    implied_h = _implied_heads(flat_h, params, cache, W_inv)
    tilde_h = ad.matmul(Tensor(avg_h), implied_h)
    d_ch = ad.row_norms(ad.subtract(ad.row_select(params.E_ent, heads), tilde_h))

    avg_t, flat_t = _averaging_matrix([cache.tail_ctx[i] for i in batch])
    implied_t = _implied_tails(flat_t, params, cache, W_inv)
    tilde_t = ad.matmul(Tensor(avg_t), implied_t)
    d_ct = ad.row_norms(ad.subtract(ad.row_select(params.E_ent, tails), tilde_t))

    loss = ad.add(ad.sum_all(d_t), ad.add(ad.sum_all(d_ch), ad.sum_all(d_ct)))

    if negatives_per_positive > 0:
        if rng is None:
            raise ValueError("negative sampling requires an rng")
        margin_vec = Tensor(np.full(batch.size, margin))
        for _ in range(negatives_per_positive):
            neg_heads, neg_tails = corrupt_triples(heads, tails,
                                                   len(cache.graph.entities), rng)
            d_neg = _batch_translational(neg_heads, rels, neg_tails, params)
            hinge = ad.relu(ad.add(margin_vec, ad.subtract(d_t, d_neg)))
            loss = ad.add(loss, ad.sum_all(hinge))
    return loss


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain(graph: KnowledgeGraph, params: KgEmbeddingParams, config,
             lr_schedule: Callable[[int], float],
             rng: np.random.Generator | None = None,
             cache: ContextCache | None = None) -> list[float]:
    """Minibatch pretraining of the embedding parameters.

    Runs config.kge_pretrain_epochs epochs at config.batch_size_kge with
    Adam, gradient clipping at config.grad_clip, and unit-ball projection
    of entity rows after every step.  Returns per-epoch mean losses.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if cache is None:
        cache = ContextCache(graph)
    logger.info("pretraining KG embedding: %d triples, condition number %.3e",
                len(graph.triples), params.condition_number())
    adam = Adam(params.tensors())
    n = len(graph.triples)
    history: list[float] = []
    for epoch in range(config.kge_pretrain_epochs):
        order = rng.permutation(n)
        lr = lr_schedule(epoch)
        losses = []
        for start in range(0, n, config.batch_size_kge):
            batch = order[start:start + config.batch_size_kge]
            adam.zero_grad()
            with Tape() as tape:
                loss = kge_loss(batch, params, cache,
                                negatives_per_positive=config.negatives,
                                margin=config.margin, rng=rng)
            tape.backward(loss)
            clip_gradients(params.tensors().values(), config.grad_clip)
            adam.step(lr)
            params.project_entity_norms()
            losses.append(float(loss.data) / len(batch))
        history.append(float(np.mean(losses)))
        logger.debug("kge epoch %d: loss %.4f lr %.2e", epoch, history[-1], lr)
    logger.info("pretraining done: loss %.4f -> %.4f, condition number %.3e",
                history[0], history[-1], params.condition_number())
    return history


def mean_distances(graph: KnowledgeGraph, params: KgEmbeddingParams,
                   corruptions_per_triple: int = 10,
                   seed: int = 0) -> tuple[float, float]:
    """Mean translational distance over true triples vs random corruptions."""
    cache = ContextCache(graph)
    rng = np.random.default_rng(seed)
    d_pos = _batch_translational(cache.heads, cache.rels, cache.tails, params)
    neg_values = []
    for _ in range(corruptions_per_triple):
        neg_heads, neg_tails = corrupt_triples(cache.heads, cache.tails,
                                               len(graph.entities), rng)
        d_neg = _batch_translational(neg_heads, cache.rels, neg_tails, params)
        neg_values.append(d_neg.data)
    return float(d_pos.data.mean()), float(np.concatenate(neg_values).mean())

"""Two-stage training, Hits@1 evaluation, and the ablation switches.

Stage 1 pretrains the KG embedding on the graph alone; stage 2 runs the
question-answering epochs, interleaving one embedding refresh batch per
``kge_refresh_every`` QA batches so the embeddings keep serving both
objectives.  Validation Hits@1 gates early stopping and the
best-on-validation parameters are restored at the end.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape
from .dataio import Dataset, QaExample, resolve_answer_ids
from .kgembed import ContextCache, kge_loss, pretrain
from .kgstore import KnowledgeGraph
from .optim import Adam, clip_gradients
from .qencoder import TokenVocab
from .reasoner import Qa2mnNetwork

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a parameter snapshot for post-mortem."""

    def __init__(self, message: str, snapshot: dict[str, np.ndarray]):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    batch_size_qa: int = 48
    batch_size_kge: int = 64
    kge_pretrain_epochs: int = 20
    k_hops: int = 3
    z_hops: int = 3
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    lr_decay: float = 0.96
    grad_clip: float = 10.0
    d_ent: int = 100
    d_rel: int = 100
    d_emb: int = 100
    d_hid: int = 100
    slot_dropout: float = 0.1
    seed: int = 13
    qa_epochs: int = 100
    patience: int = 10
    kge_refresh_every: int = 4
    no_kge_pretrain: bool = False
    no_question_aware: bool = False
    margin: float = 1.0
    negatives: int = 1
    n_max: int = 2048

    def validate(self) -> None:
        positive = ["batch_size_qa", "batch_size_kge", "k_hops", "z_hops",
                    "lr_init", "lr_min", "grad_clip", "d_ent", "d_rel", "d_emb",
                    "d_hid", "qa_epochs", "patience", "kge_refresh_every", "n_max"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"config key {name!r} must be positive")
        if self.lr_min > self.lr_init:
            raise ConfigError("lr_min", "lr_min must not exceed lr_init")
        if not (self.d_ent == self.d_rel == self.d_emb == self.d_hid):
            raise ConfigError("d_ent", "embedding and hidden dims must all be equal")
        if not 0.0 <= self.slot_dropout < 1.0:
            raise ConfigError("slot_dropout", "slot_dropout must be in [0, 1)")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat key=value text; unknown keys are rejected by name."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(line, f"{path}: line {lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise ConfigError(key, f"{path}: line {lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            if ftype in ("bool", bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ConfigError(key, f"{path}: line {lineno}: bad bool {raw!r}")
                values[key] = raw.lower() in ("true", "1")
            elif ftype in ("int", int):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        config = cls(**values)
        config.validate()
        return config

    def to_file(self, path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(epoch: int, lr_init: float = 1e-3, lr_min: float = 1e-5,
          decay: float = 0.96) -> float:
    """Exponentially annealed learning rate, clamped at the floor."""
    return max(lr_min, lr_init * decay ** epoch)


def split_dataset(examples: Sequence[QaExample], seed: int):
    """Seeded shuffle then 80/10/10; size remainders go to the test split."""
    order = np.random.default_rng(seed).permutation(len(examples))
    n = len(examples)
    n_train = int(0.8 * n)
    n_valid = int(0.1 * n)
    train = [examples[i] for i in order[:n_train]]
    valid = [examples[i] for i in order[n_train:n_train + n_valid]]
    test = [examples[i] for i in order[n_train + n_valid:]]
    return train, valid, test


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    qid: str
    gold: list[str]
    predicted: str | None
    correct: bool
    answerable: bool
    covered: bool  # some gold entity appeared among the candidates


@dataclass
class EvalReport:
    hits_at_1: float
    records: list[EvalRecord]
    coverage: float

    def to_jsonl(self, path) -> None:
        import json
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(dataclasses.asdict(r), ensure_ascii=False) + "\n")


def _eval_one(network: Qa2mnNetwork, example: QaExample) -> EvalRecord:
    gold_ids = set(resolve_answer_ids(network.graph, example.answers))
    result = network.forward(example.question)
    if not result.answerable or not gold_ids:
        return EvalRecord(example.id, example.answers, None, False, False, False)
    top = result.top_entity()
    covered = any(g in result.slots.candidate_position for g in gold_ids)
    return EvalRecord(example.id, example.answers, network.graph.entities[top],
                      top in gold_ids, True, covered)


def evaluate(network: Qa2mnNetwork, examples: Sequence[QaExample],
             threads: int | None = None) -> EvalReport:
    """Hits@1 over frozen parameters; a prediction is correct when the
    top-ranked entity matches any gold answer.  Unanswerable questions
    count as incorrect.  QA2MN_THREADS (or ``threads``) fans questions
    out over worker threads; records keep input order either way.
    """
    if threads is None:
        threads = int(os.environ.get("QA2MN_THREADS", "1"))
    if threads > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda ex: _eval_one(network, ex), examples))
    else:
        records = [_eval_one(network, ex) for ex in examples]
    n = max(1, len(records))
    hits = sum(r.correct for r in records) / n
    coverage = sum(r.covered for r in records) / n
    return EvalReport(hits, records, coverage)


def attention_progression(network: Qa2mnNetwork,
                          examples: Sequence[QaExample]) -> float:
    """Fraction of correctly answered questions whose per-hop question
    attention argmax moves strictly rightward hop over hop."""
    progressing = 0
    correct = 0
    for ex in examples:
        gold_ids = set(resolve_answer_ids(network.graph, ex.answers))
        result = network.forward(ex.question)
        if not result.answerable or result.top_entity() not in gold_ids:
            continue
        correct += 1
        positions = [result.trace.question_argmax(z)
                     for z in range(len(result.trace.hops))]
        if all(a < b for a, b in zip(positions, positions[1:])):
            progressing += 1
    return progressing / correct if correct else 0.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    network: Qa2mnNetwork
    history: list[dict]
    best_epoch: int
    best_valid_hits: float
    splits: tuple[list[QaExample], list[QaExample], list[QaExample]]
    config: TrainConfig


def write_history_csv(history: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "hits_at_1", "lr"])
        for row in history:
            writer.writerow([row["epoch"], row["split"], row.get("loss", ""),
                             row.get("hits_at_1", ""), row["lr"]])


def _scale_gradients(network: Qa2mnNetwork, factor: float) -> None:
    for t in network.params().values():
        if t.grad is not None:
            t.grad *= factor


def fit_network(network: Qa2mnNetwork, train_examples: Sequence[QaExample],
                valid_examples: Sequence[QaExample], config: TrainConfig,
                rng: np.random.Generator,
                cache: ContextCache | None = None) -> tuple[list[dict], int, float]:
    """Stage-2 QA epochs with interleaved embedding refresh batches.

    Returns (history rows, best epoch, best validation Hits@1); the
    network is left holding the best-on-validation parameters.
    """
    graph = network.graph
    if cache is None:
        cache = ContextCache(graph)
    gold_cache = {ex.id: resolve_answer_ids(graph, ex.answers) for ex in train_examples}
    # The two objectives alternate on overlapping parameters; giving each its
    # own Adam state keeps the large embedding-loss moments from drowning the
    # much smaller QA gradients.
    adam = Adam(network.params())
    adam_kge = Adam(network.kge.tensors())
    history: list[dict] = []
    best_hits = -1.0
    best_epoch = -1
    best_snapshot = network.snapshot()
    stale = 0
    n_triples = len(graph.triples)
    for epoch in range(config.qa_epochs):
        lr = lr_at(epoch, config.lr_init, config.lr_min, config.lr_decay)
        order = rng.permutation(len(train_examples))
        losses: list[float] = []
        for batch_index, start in enumerate(range(0, len(order), config.batch_size_qa)):
            batch = order[start:start + config.batch_size_qa]
            adam.zero_grad()
            used = 0
            batch_loss = 0.0
            for i in batch:
                ex = train_examples[i]
                gold = gold_cache[ex.id]
                if not gold:
                    continue
                with Tape() as tape:
                    result = network.forward(ex.question, train=True, rng=rng)
                    loss = network.loss(result, gold)
                    if loss is None:
                        continue
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite QA loss at epoch {epoch}, question {ex.id}",
                            network.snapshot())
                    tape.backward(loss)
                batch_loss += value
                used += 1
            if used == 0:
                continue
            _scale_gradients(network, 1.0 / used)
            clip_gradients(network.params().values(), config.grad_clip)
            adam.step(lr)
            network.kge.project_entity_norms()
            losses.append(batch_loss / used)

            if (batch_index + 1) % config.kge_refresh_every == 0 and n_triples > 0:
                adam_kge.zero_grad()
                size = min(config.batch_size_kge, n_triples)
                kge_batch = rng.choice(n_triples, size=size, replace=False)
                with Tape() as tape:
                    loss = kge_loss(kge_batch, network.kge, cache,
                                    negatives_per_positive=config.negatives,
                                    margin=config.margin, rng=rng)
                    if not np.isfinite(float(loss.data)):
                        raise TrainingDiverged(
                            f"non-finite KGE loss at epoch {epoch}", network.snapshot())
                    tape.backward(loss)
                clip_gradients(network.kge.tensors().values(), config.grad_clip)
                adam_kge.step(lr)
                network.kge.project_entity_norms()

        mean_loss = float(np.mean(losses)) if losses else float("nan")
        report = evaluate(network, valid_examples)
        history.append({"epoch": epoch, "split": "train", "loss": f"{mean_loss:.6f}", "lr": lr})
        history.append({"epoch": epoch, "split": "valid",
                        "hits_at_1": f"{report.hits_at_1:.6f}", "lr": lr})
        logger.info("epoch %d: train loss %.4f, valid hits@1 %.4f, lr %.2e",
                    epoch, mean_loss, report.hits_at_1, lr)
        if report.hits_at_1 > best_hits:
            best_hits = report.hits_at_1
            best_epoch = epoch
            best_snapshot = network.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best %.4f at epoch %d)",
                            epoch, best_hits, best_epoch)
                break
    network.load_tensors(best_snapshot)
    return history, best_epoch, best_hits


def train(config: TrainConfig, dataset: Dataset,
          graph: KnowledgeGraph | None = None) -> TrainResult:
    """Full two-stage protocol: split, optional embedding pretraining,
    QA fitting with validation-gated early stopping."""
    config.validate()
    graph = graph if graph is not None else dataset.graph
    if graph is None:
        raise ValueError("no knowledge graph supplied")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_kge = np.random.default_rng(seeds[1])
    rng_qa = np.random.default_rng(seeds[2])

    train_examples, valid_examples, test_examples = split_dataset(dataset.examples,
                                                                  config.seed)
    vocab = TokenVocab.build(ex.question for ex in train_examples)
    network = Qa2mnNetwork.build(graph, vocab, config, rng_init)
    cache = ContextCache(graph)
    if not config.no_kge_pretrain:
        pretrain(graph, network.kge, config,
                 lr_schedule=lambda e: lr_at(e, config.lr_init, config.lr_min,
                                             config.lr_decay),
                 rng=rng_kge, cache=cache)
    history, best_epoch, best_hits = fit_network(network, train_examples,
                                                 valid_examples, config, rng_qa,
                                                 cache=cache)
    return TrainResult(network, history, best_epoch, best_hits,
                       (train_examples, valid_examples, test_examples), config)

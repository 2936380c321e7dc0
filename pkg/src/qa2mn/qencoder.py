"""Question tokenization and bidirectional GRU encoding.

Questions are lowercased and split on whitespace, so underscore-joined
entity mentions stay single tokens.  Each direction runs a standard GRU
(update gate, reset gate, tanh candidate; the candidate sees the reset-
masked hidden state) from a zero initial state over 50-dim states; the
per-token encoding concatenates both directions and the integrated
question vector pairs the last forward state with the first-position
backward state.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


def tokenize(question: str) -> list[str]:
    """Lowercase whitespace tokenization; rejects blank questions."""
    tokens = question.lower().split()
    if not tokens:
        raise ValueError("empty or whitespace-only question")
    return tokens


class TokenVocab:
    """Token -> id map with reserved PAD=0 and UNK=1 entries."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, questions: Iterable[str]) -> "TokenVocab":
        """Collect tokens from training questions in first-seen order."""
        tokens = {PAD_TOKEN: None, UNK_TOKEN: None}
        for q in questions:
            for tok in tokenize(q):
                tokens.setdefault(tok)
        return cls(list(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.intp)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


class GruParams:
    """Token embeddings plus per-direction GRU weights.

    Per direction: W_x maps the token embedding to the three stacked gate
    pre-activations [z, r, n] with bias b; U_zr maps the previous state to
    the z and r pre-activations; U_n maps the reset-masked state to the
    candidate pre-activation.
    """

    def __init__(self, vocab_size: int, d_emb: int, d_hid: int,
                 rng: np.random.Generator):
        if d_hid % 2 != 0:
            raise ValueError(f"hidden size must be even, got {d_hid}")
        self.d_emb = d_emb
        self.d_hid = d_hid
        h = d_hid // 2
        self.E_tok = Tensor(self._uniform(rng, (vocab_size, d_emb), d_emb),
                            requires_grad=True)
        self.directions = {}
        for name in ("fwd", "bwd"):
            self.directions[name] = {
                "W_x": Tensor(self._uniform(rng, (d_emb, 3 * h), d_emb), requires_grad=True),
                "U_zr": Tensor(self._uniform(rng, (h, 2 * h), h), requires_grad=True),
                "U_n": Tensor(self._uniform(rng, (h, h), h), requires_grad=True),
                "b": Tensor(np.zeros(3 * h), requires_grad=True),
            }

    @staticmethod
    def _uniform(rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def tensors(self) -> dict[str, Tensor]:
        out = {"enc.E_tok": self.E_tok}
        for direction, weights in self.directions.items():
            for key, tensor in weights.items():
                out[f"enc.{direction}.{key}"] = tensor
        return out


class QuestionEncoding:
    """Per-token hidden states H (M x d_hid) and integrated vector h_x."""

    def __init__(self, H: Tensor, h_x: Tensor, tokens: list[str]):
        self.H = H
        self.h_x = h_x
        self.tokens = tokens

    @property
    def length(self) -> int:
        return self.H.data.shape[0]


def _gru_direction(proj: Tensor, weights: dict, length: int, h_size: int,
                   reverse: bool) -> list[Tensor]:
    """Run one GRU direction over precomputed input projections.

    Returns hidden states indexed by original token position.
    """
    U_zr, U_n = weights["U_zr"], weights["U_n"]
    h = Tensor(np.zeros(h_size))
    states: list[Tensor] = [None] * length  # type: ignore[list-item]
    positions = range(length - 1, -1, -1) if reverse else range(length)
    for pos in positions:
        p = ad.row(proj, pos)
        pz = ad.slice1d(p, 0, h_size)
        pr = ad.slice1d(p, h_size, 2 * h_size)
        pn = ad.slice1d(p, 2 * h_size, 3 * h_size)
        rec = ad.matmul(h, U_zr)
        z = ad.sigmoid(ad.add(pz, ad.slice1d(rec, 0, h_size)))
        r = ad.sigmoid(ad.add(pr, ad.slice1d(rec, h_size, 2 * h_size)))
        n = ad.tanh(ad.add(pn, ad.matmul(ad.multiply(r, h), U_n)))
        # h' = (1 - z) * h + z * n
        h = ad.add(ad.subtract(h, ad.multiply(z, h)), ad.multiply(z, n))
        states[pos] = h
    return states


def encode(token_ids, params: GruParams, tokens: list[str] | None = None) -> QuestionEncoding:
    """Encode a token-id sequence of length M >= 1 into H (M x d_hid) and h_x."""
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.size < 1:
        raise ValueError("cannot encode an empty token sequence")
    h = params.d_hid // 2
    emb = ad.row_select(params.E_tok, ids)
    states = {}
    for name, weights in params.directions.items():
        proj = ad.add_bias(ad.matmul(emb, weights["W_x"]), weights["b"])
        states[name] = _gru_direction(proj, weights, ids.size, h,
                                      reverse=(name == "bwd"))
    rows = [ad.concat([states["fwd"][i], states["bwd"][i]]) for i in range(ids.size)]
    H = ad.stack_rows(rows)
    h_x = ad.concat([states["fwd"][ids.size - 1], states["bwd"][0]])
    return QuestionEncoding(H, h_x, tokens if tokens is not None else [str(i) for i in ids])

import numpy as np
import pytest

from qa2mn.autodiff import Tape, finite_difference_gradient, max_relative_error
from qa2mn.qencoder import (
    PAD_ID,
    UNK_ID,
    GruParams,
    TokenVocab,
    encode,
    tokenize,
)


FIG4_QUESTION = "what is the archduke_johann_of_austria -s mother -s father -s religious belief ?"


def make_params(vocab_size=8, d_emb=4, d_hid=4, seed=0):
    return GruParams(vocab_size, d_emb, d_hid, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# tokenization and vocabulary
# ---------------------------------------------------------------------------

def test_tokenize_keeps_entity_mention_whole():
    tokens = tokenize(FIG4_QUESTION)
    assert len(tokens) == 12
    assert tokens[3] == "archduke_johann_of_austria"


def test_tokenize_single_letter():
    assert tokenize("A") == ["a"]


def test_tokenize_rejects_blank():
    with pytest.raises(ValueError):
        tokenize("   ")


@pytest.mark.parametrize("question", [
    FIG4_QUESTION,
    "which country does L_MESSI play professional in ?",
    "what is the e3 's rel1 's rel2 ?",
])
def test_tokenize_round_trip_idempotent(question):
    tokens = tokenize(question)
    assert tokenize(" ".join(tokens)) == tokens


def test_vocab_reserved_ids():
    vocab = TokenVocab.build(["what is x ?"])
    assert vocab.tokens[PAD_ID] == "<pad>"
    assert vocab.tokens[UNK_ID] == "<unk>"
    assert vocab.id("what") >= 2


def test_vocab_unseen_maps_to_unk():
    vocab = TokenVocab.build(["what is x ?"])
    assert vocab.id("zebra") == UNK_ID


def test_vocab_save_load_round_trip(tmp_path):
    vocab = TokenVocab.build(["what is the answer ?", "who is x ?"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = TokenVocab.load(path)
    assert loaded.tokens == vocab.tokens


def test_vocab_first_seen_order():
    vocab = TokenVocab.build(["b a", "a c"])
    assert vocab.tokens[2:] == ["b", "a", "c"]


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_single_token_shapes():
    params = make_params(d_hid=100, d_emb=100, vocab_size=5, seed=1)
    enc = encode([2], params)
    assert enc.H.data.shape == (1, 100)
    assert enc.h_x.data.shape == (100,)
    # with one token both directions start from the zero state
    assert np.array_equal(enc.H.data[0], enc.h_x.data)


def test_h_x_is_last_forward_first_backward():
    params = make_params(seed=3)
    enc = encode([1, 2, 3], params)
    h = params.d_hid // 2
    assert np.array_equal(enc.h_x.data[:h], enc.H.data[-1, :h])
    assert np.array_equal(enc.h_x.data[h:], enc.H.data[0, h:])


def test_hidden_states_bounded():
    params = make_params(vocab_size=50, d_emb=8, d_hid=8, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        ids = rng.integers(0, 50, size=rng.integers(1, 12))
        enc = encode(ids, params)
        assert np.all(np.abs(enc.H.data) < 1.0)


def manual_gru_step(x, h, W_x, U_zr, U_n, b, hs):
    """Straight-line oracle for one GRU step."""
    p = x @ W_x + b
    rec = h @ U_zr
    z = 1.0 / (1.0 + np.exp(-(p[:hs] + rec[:hs])))
    r = 1.0 / (1.0 + np.exp(-(p[hs:2 * hs] + rec[hs:])))
    n = np.tanh(p[2 * hs:] + (r * h) @ U_n)
    return (1.0 - z) * h + z * n


def test_matches_manual_gru_oracle():
    """Fixed tiny weights, M=2, d=2: compare against hand arithmetic."""
    params = make_params(vocab_size=4, d_emb=2, d_hid=4, seed=7)
    ids = [1, 3]
    enc = encode(ids, params)
    hs = 2
    for name, order in (("fwd", ids), ("bwd", ids[::-1])):
        w = params.directions[name]
        h = np.zeros(hs)
        states = []
        for tok in order:
            h = manual_gru_step(params.E_tok.data[tok], h, w["W_x"].data,
                                w["U_zr"].data, w["U_n"].data, w["b"].data, hs)
            states.append(h)
        if name == "fwd":
            assert np.allclose(enc.H.data[:, :hs], np.stack(states), atol=1e-12)
        else:
            assert np.allclose(enc.H.data[:, hs:], np.stack(states[::-1]), atol=1e-12)


def test_reversal_symmetry():
    """Encoding reversed tokens with swapped direction parameters gives the
    row-reversed, half-swapped state matrix."""
    params = make_params(vocab_size=6, d_emb=3, d_hid=6, seed=11)
    swapped = make_params(vocab_size=6, d_emb=3, d_hid=6, seed=11)
    swapped.directions = {"fwd": params.directions["bwd"],
                          "bwd": params.directions["fwd"]}
    ids = [1, 4, 2, 5]
    enc = encode(ids, params)
    enc_rev = encode(ids[::-1], swapped)
    h = 3
    flipped = np.concatenate([enc_rev.H.data[::-1, h:], enc_rev.H.data[::-1, :h]], axis=1)
    assert np.allclose(enc.H.data, flipped, atol=1e-12)


def test_encode_rejects_empty():
    params = make_params()
    with pytest.raises(ValueError):
        encode([], params)


def test_bigru_gradients_match_finite_differences():
    """Full BiGRU (M=3, d=4) gradient check at 1e-5."""
    params = make_params(vocab_size=6, d_emb=4, d_hid=4, seed=13)
    ids = [1, 5, 2]
    rng = np.random.default_rng(1)
    w_h = rng.normal(size=(3, 4))
    w_x = rng.normal(size=4)

    def forward():
        enc = encode(ids, params)
        from qa2mn import autodiff as ad
        return ad.add(ad.sum_all(ad.multiply(enc.H, ad.Tensor(w_h))),
                      ad.matmul(enc.h_x, ad.Tensor(w_x)))

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    for name, t in params.tensors().items():
        numeric = finite_difference_gradient(forward, t)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = max_relative_error(analytic, numeric)
        assert err < 1e-5, f"{name}: rel err {err:.2e}"


def test_encode_deterministic():
    params = make_params(seed=17)
    a = encode([1, 2, 3], params)
    b = encode([1, 2, 3], params)
    assert np.array_equal(a.H.data, b.H.data)

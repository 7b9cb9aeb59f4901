import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mctcap.embedder import (
    BOS, EOS, PAD, UNK, CharVocab, ElmoConfig, LSTMCellParams, Vocabulary, bind_elmo, build_vocab,
    char_encode, char_id_matrix, elmo_embed, elmo_embed_prefix, elmo_layers, init_elmo, lstm_cell,
    mix_layers, tokenize,
)
from mctcap.tensor import Tensor, grad_check, mul, reduce_sum, wrap_all


def elmo_params(layers=1, emb=8, d_char=4, n_chars=10, seed=0):
    raw = init_elmo(ElmoConfig(layers=layers, emb=emb, d_char=d_char, max_word_len=6), n_chars,
                    np.random.default_rng(seed))
    return raw, bind_elmo(wrap_all(raw))


def test_tokenize():
    assert tokenize("A red circle, and a BLUE star!") == ["a", "red", "circle", "and", "a", "blue", "star"]
    assert tokenize("dog's  bowl-2") == ["dog's", "bowl", "2"]
    assert tokenize("  ...  ") == []


def test_vocabulary_reserved_ids_and_round_trip(tmp_path):
    v = build_vocab(["b a a", "c a b"], min_count=2)
    assert v.words[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert v.words[4:] == ["a", "b"]
    assert v.encode(["a", "zzz"]) == [BOS, 4, UNK, EOS]
    assert v.decode([BOS, 4, 5, EOS, 4]) == ["a", "b"]
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").words == v.words


def test_build_vocab_orders_by_count_then_word():
    v = build_vocab(["z y y x x"], min_count=1)
    assert v.words[4:] == ["x", "y", "z"]
    with pytest.raises(ValueError):
        build_vocab([], min_count=1)


def test_char_ids_truncate_and_pool_only_real_chars():
    chars = CharVocab(["a", "c", "t"])
    ids, w = char_id_matrix(["cat", "tacocat"], chars, 4)
    np.testing.assert_array_equal(ids[0], [3, 2, 4, 0])
    np.testing.assert_allclose(w[0], [1 / 3, 1 / 3, 1 / 3, 0.0])
    assert ids[1, 3] == CharVocab.UNK_CHAR  # "o" is unknown
    np.testing.assert_allclose(w[1], 0.25)


def test_char_encode_hand_value():
    raw, _ = elmo_params(emb=2, d_char=2, n_chars=5)
    raw["elmo.char_table"] = np.array([[9.0, 9.0], [9.0, 9.0], [0.0, 2.0], [1.0, 0.0], [3.0, -4.0]])
    raw["elmo.char_proj.w"] = np.eye(2)
    raw["elmo.char_proj.b"] = np.zeros(2)
    out = char_encode("cat", bind_elmo(wrap_all(raw)), CharVocab(["a", "c", "t"]), 12).data
    # mean of c=[1,0], a=[0,2], t=[3,-4] is [4/3, -2/3]; relu clears the second entry
    np.testing.assert_allclose(out, [4 / 3, 0.0], atol=1e-15)


def test_lstm_with_zero_weights_halves_the_cell():
    d = 3
    zero = LSTMCellParams(np.zeros((2, 4 * d)), np.zeros((d, 4 * d)), np.zeros(4 * d))
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = lstm_cell(np.ones(2), np.ones(d), c_prev, zero)
    np.testing.assert_allclose(c.data, 0.5 * c_prev, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)


def test_lstm_gate_order():
    # saturate only the forget gate open and the input gate shut
    b = np.array([-50.0, 50.0, 0.0, 50.0])
    p = LSTMCellParams(np.zeros((1, 4)), np.zeros((1, 4)), b)
    h, c = lstm_cell(np.ones(1), np.zeros(1), np.array([0.7]), p)
    assert c.data[0] == pytest.approx(0.7)
    assert h.data[0] == pytest.approx(math.tanh(0.7))


def test_lstm_batched_equals_rowwise(rng):
    p = LSTMCellParams(*(rng.normal(size=s) for s in ((4, 8), (2, 8), (8,))))
    x, h0, c0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    h, c = lstm_cell(x, h0, c0, p)
    for r in range(3):
        hr, cr = lstm_cell(x[r], h0[r], c0[r], p)
        np.testing.assert_allclose(h.data[r], hr.data, atol=1e-14)
        np.testing.assert_allclose(c.data[r], cr.data, atol=1e-14)


def test_bilstm_reverses_with_shared_weights(rng):
    raw, _ = elmo_params(layers=2, emb=8)
    for j in range(2):
        for k in ("w_x", "w_h", "b"):
            raw[f"elmo.lstm{j}.bwd.{k}"] = raw[f"elmo.lstm{j}.fwd.{k}"]
    params = bind_elmo(wrap_all(raw))
    x = rng.normal(size=(5, 8))
    fwd = elmo_layers(Tensor(x), params)[1].data
    rev = elmo_layers(Tensor(x[::-1].copy()), params)[1].data
    # reversing the sentence swaps the two halves and reverses the rows
    np.testing.assert_allclose(rev[::-1, :4], fwd[:, 4:], atol=1e-12)
    np.testing.assert_allclose(rev[::-1, 4:], fwd[:, :4], atol=1e-12)


def test_mixing_weights_are_a_softmax(rng):
    raw, _ = elmo_params(layers=2)
    raw["elmo.mix_logits"] = np.array([0.0, math.log(2.0), math.log(5.0)])
    raw["elmo.gamma"] = np.array([2.0])
    params = bind_elmo(wrap_all(raw))
    np.testing.assert_allclose(params.mixing_weights(), [1 / 8, 2 / 8, 5 / 8])
    layers = [rng.normal(size=(2, 8)) for _ in range(3)]
    expected = 2.0 * (layers[0] / 8 + 2 * layers[1] / 8 + 5 * layers[2] / 8)
    np.testing.assert_allclose(mix_layers([Tensor(v) for v in layers], params).data, expected, atol=1e-14)


def test_single_word_sentence(rng):
    _, params = elmo_params()
    out = elmo_embed(["cat"], params, CharVocab(["a", "c", "t"]), 6)
    assert out.shape == (1, 8)
    with pytest.raises(ValueError):
        elmo_embed([], params, CharVocab([]), 6)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_prefix_elmo_equals_recomputation_on_prefix(G, seed):
    _, params = elmo_params(layers=1, seed=seed % 5)
    layer0 = np.random.default_rng(seed).normal(size=(G, 8))
    got = elmo_embed_prefix(Tensor(layer0), params).data
    for g in range(G):
        ref = mix_layers(elmo_layers(Tensor(layer0[:g + 1]), params), params).data[g]
        np.testing.assert_allclose(got[g], ref, atol=1e-12)


def test_prefix_elmo_is_causal(rng):
    _, params = elmo_params(layers=2)
    a = rng.normal(size=(5, 8))
    b = a.copy()
    b[3:] = rng.normal(size=(2, 8))
    np.testing.assert_allclose(elmo_embed_prefix(Tensor(a), params).data[:3],
                               elmo_embed_prefix(Tensor(b), params).data[:3], atol=1e-14)


def test_prefix_elmo_batched(rng):
    _, params = elmo_params()
    batch = rng.normal(size=(3, 4, 8))
    out = elmo_embed_prefix(Tensor(batch), params).data
    for i in range(3):
        np.testing.assert_allclose(out[i], elmo_embed_prefix(Tensor(batch[i]), params).data, atol=1e-13)


@pytest.mark.parametrize("name", ["elmo.char_table", "elmo.char_proj.w", "elmo.lstm0.fwd.w_h",
                                  "elmo.lstm0.bwd.w_x", "elmo.lstm0.bwd.b", "elmo.mix_logits", "elmo.gamma"])
def test_elmo_gradient(name):
    rng = np.random.default_rng(3)
    raw, _ = elmo_params(layers=1, emb=8, n_chars=5, seed=3)
    raw["elmo.mix_logits"] = rng.normal(size=2)
    # glorot-sized recurrent weights leave some coordinates with ~1e-9 gradients,
    # below what central differences can resolve
    for k in raw:
        if ".lstm" in k:
            raw[k] = rng.normal(scale=0.6, size=raw[k].shape)
    chars = CharVocab(["a", "c", "t"])
    words = ["cat", "act", "tat"]
    readout = rng.normal(size=(3, 8))

    def fn(t):
        bound = wrap_all(raw)
        bound[name] = t
        return reduce_sum(mul(elmo_embed(words, bind_elmo(bound), chars, 6), readout))

    assert grad_check(fn, raw[name], 1e-5) < 1e-4

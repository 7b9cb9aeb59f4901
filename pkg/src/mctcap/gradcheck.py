"""Finite-difference checks for every differentiable operation family."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .decoder import DecoderConfig, bind_decoder_blocks, decoder_block, init_decoder
from .embedder import ElmoConfig, bind_elmo, init_elmo, lstm_cell, mix_layers, LSTMCellParams
from .encoder import (
    AttentionHeadParams, EncoderConfig, attend, bind_encoder_blocks, encoder_block, init_encoder,
)
from .tensor import (
    Tensor, grad_check, layer_norm, matmul, mul, reduce_sum, relu, softmax_rows, wrap_all,
)
from .training import cross_entropy_loss

THRESHOLD = 1e-4
EPS = 1e-5


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear readout keeps every output coordinate in play
    return reduce_sum(mul(out, weights))


def _check(fn: Callable[[Tensor], Tensor], x: np.ndarray, rng, fault) -> float:
    probe = fn(Tensor(x))
    w = rng.normal(size=probe.shape)
    return grad_check(lambda t: _readout(fn(t), w), x, EPS, fault=fault)


def _with(params: Dict[str, np.ndarray], name: str, t: Tensor) -> Dict[str, Tensor]:
    bound = wrap_all(params)
    bound[name] = t
    return bound


def family_checks(seed: int = 0, fault: Optional[str] = None) -> List[Tuple[str, float]]:
    """Max relative error per family; several inputs are checked where a family has parameters."""
    rng = np.random.default_rng(seed)
    results: List[Tuple[str, float]] = []

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    results.append(("matmul", max(_check(lambda t: matmul(t, b), a, rng, fault),
                                  _check(lambda t: matmul(a, t), b, rng, fault))))

    results.append(("softmax", _check(softmax_rows, rng.normal(size=(3, 4)), rng, fault)))

    x = rng.normal(size=(3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    results.append(("layer_norm", max(
        _check(lambda t: layer_norm(t, gain, bias), x, rng, fault),
        _check(lambda t: layer_norm(x, t, bias), gain, rng, fault),
        _check(lambda t: layer_norm(x, gain, t), bias, rng, fault))))

    r = rng.normal(size=(3, 4))
    r[np.abs(r) < 1e-3] = 0.5
    results.append(("relu", _check(relu, r, rng, fault)))

    d_model, d_head = 8, 4
    q, kv = rng.normal(size=(3, d_model)), rng.normal(size=(4, d_model))
    ws = [rng.normal(scale=0.5, size=(d_model, d_head)) for _ in range(3)]
    mask = np.tril(np.ones((3, 4), dtype=bool), k=1)
    results.append(("attention_head", max(
        _check(lambda t: attend(t, kv, kv, AttentionHeadParams(*ws), mask), q, rng, fault),
        _check(lambda t: attend(q, t, t, AttentionHeadParams(*ws), mask), kv, rng, fault),
        _check(lambda t: attend(q, kv, kv, AttentionHeadParams(t, ws[1], ws[2]), mask), ws[0], rng, fault),
        _check(lambda t: attend(q, kv, kv, AttentionHeadParams(ws[0], t, ws[2]), mask), ws[1], rng, fault),
        _check(lambda t: attend(q, kv, kv, AttentionHeadParams(ws[0], ws[1], t), mask), ws[2], rng, fault))))

    ecfg = EncoderConfig(d_feat=6, d_model=8, n_heads=2, d_head=4, d_ffn=16, depth=1)
    ep = init_encoder(ecfg, rng)
    _perturb_norms(ep, rng)
    u = rng.normal(size=(3, 8))

    def enc(name):
        return lambda t: encoder_block(u, bind_encoder_blocks(_with(ep, name, t))[0])

    results.append(("encoder_block", max(
        _check(lambda t: encoder_block(t, bind_encoder_blocks(wrap_all(ep))[0]), u, rng, fault),
        *[_check(enc(n), ep[n], rng, fault) for n in
          ("enc.0.attn.head0.wq", "enc.0.attn.g_out", "enc.0.ffn.g1", "enc.0.ffn.s2", "enc.0.ln1.gain")]),
    ))

    dcfg = DecoderConfig(d_model=8, n_heads=2, d_head=4, d_ffn=16, depth=1)
    dp = {k: v for k, v in init_decoder(dcfg, 6, rng).items() if k.startswith("dec.0")}
    _perturb_norms(dp, rng)
    xt, mem = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))

    def dec(name):
        return lambda t: decoder_block(xt, mem, bind_decoder_blocks(_with(dp, name, t))[0])

    results.append(("decoder_block", max(
        _check(lambda t: decoder_block(t, mem, bind_decoder_blocks(wrap_all(dp))[0]), xt, rng, fault),
        _check(lambda t: decoder_block(xt, t, bind_decoder_blocks(wrap_all(dp))[0]), mem, rng, fault),
        *[_check(dec(n), dp[n], rng, fault) for n in
          ("dec.0.self.head0.wk", "dec.0.cross.head1.wv", "dec.0.cross.g_out", "dec.0.ffn.g2", "dec.0.ln3.bias")]),
    ))

    d_in, d_h = 5, 3
    cell = [rng.normal(scale=0.5, size=s) for s in ((d_in, 4 * d_h), (d_h, 4 * d_h), (4 * d_h,))]
    xin, h0, c0 = rng.normal(size=(2, d_in)), rng.normal(size=(2, d_h)), rng.normal(size=(2, d_h))

    def lstm_out(xv, hv, cv, p):
        h, c = lstm_cell(xv, hv, cv, LSTMCellParams(*p))
        return h + c * 0.5

    results.append(("lstm_cell", max(
        _check(lambda t: lstm_out(t, h0, c0, cell), xin, rng, fault),
        _check(lambda t: lstm_out(xin, t, c0, cell), h0, rng, fault),
        _check(lambda t: lstm_out(xin, h0, t, cell), c0, rng, fault),
        _check(lambda t: lstm_out(xin, h0, c0, [t, cell[1], cell[2]]), cell[0], rng, fault),
        _check(lambda t: lstm_out(xin, h0, c0, [cell[0], t, cell[2]]), cell[1], rng, fault),
        _check(lambda t: lstm_out(xin, h0, c0, [cell[0], cell[1], t]), cell[2], rng, fault))))

    elmo_p = init_elmo(ElmoConfig(layers=2, emb=8, d_char=4, max_word_len=5), 6, rng)
    layers = [rng.normal(size=(3, 8)) for _ in range(3)]
    logits0 = rng.normal(size=3)

    def mixer(name):
        def fn(t):
            return mix_layers([Tensor(v) for v in layers], bind_elmo(_with(elmo_p, name, t)))
        return fn

    elmo_p["elmo.mix_logits"] = logits0
    results.append(("elmo_mixer", max(
        _check(mixer("elmo.mix_logits"), logits0, rng, fault),
        _check(mixer("elmo.gamma"), np.array([1.3]), rng, fault),
        _check(lambda t: mix_layers([t, Tensor(layers[1]), Tensor(layers[2])], bind_elmo(wrap_all(elmo_p))),
               layers[0], rng, fault))))

    logits = rng.normal(size=(2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    pad = np.array([[True, True, False], [True, True, True]])
    results.append(("cross_entropy", grad_check(
        lambda t: cross_entropy_loss(t, targets, pad), logits, EPS, fault=fault)))

    return results


def _perturb_norms(params: Dict[str, np.ndarray], rng) -> None:
    # default gain=1 / bias=0 would hide sign errors in the norm's own gradient
    for k in params:
        if k.endswith(".gain"):
            params[k] = 1.0 + 0.3 * rng.normal(size=params[k].shape)
        elif k.endswith(".bias") or k.endswith(".s1") or k.endswith(".s2"):
            params[k] = 0.3 * rng.normal(size=params[k].shape)

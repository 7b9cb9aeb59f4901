import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mctcap.encoder import (
    AttentionHeadParams, EncoderConfig, RegionFeatures, attend, bind_encoder_blocks, encode, encoder_block,
    init_encoder, project_features,
)
from mctcap.tensor import ShapeError, grad_check, mul, reduce_sum, wrap_all


def blocks_for(cfg, seed=0):
    params = init_encoder(cfg, np.random.default_rng(seed))
    return params, bind_encoder_blocks(wrap_all(params))


def naive_head(x, wq, wk, wv):
    # three plain matmuls, an explicit row softmax, one more matmul
    q, k, v = x @ wq, x @ wk, x @ wv
    s = q @ k.T / math.sqrt(wq.shape[1])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


def test_config_validation():
    assert EncoderConfig().d_ffn == 4096
    with pytest.raises(ValueError, match="n_heads \\* d_head"):
        EncoderConfig(d_model=32, n_heads=4, d_head=7)
    with pytest.raises(ValueError, match="depth"):
        EncoderConfig.desk(depth=0)


def test_region_features_validation():
    with pytest.raises(ValueError, match="NaN"):
        RegionFeatures("img", np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError, match="N x d_feat"):
        RegionFeatures("img", np.zeros((0, 4)))


def test_projection_width_mismatch_names_both():
    with pytest.raises(ShapeError, match="15.*16"):
        project_features(np.zeros((3, 15)), np.zeros((16, 32)), np.zeros(32))


def test_projection_is_relu_affine(rng):
    u, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    np.testing.assert_allclose(project_features(u, w, b).data, np.maximum(u @ w + b, 0.0))


def test_attention_matches_naive_oracle(rng):
    x = rng.normal(size=(5, 8))
    ws = [rng.normal(size=(8, 4)) for _ in range(3)]
    out, weights = attend(x, x, x, AttentionHeadParams(*ws), return_weights=True)
    np.testing.assert_allclose(out.data, naive_head(x, *ws), atol=1e-12)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(weights >= 0)


def test_single_region_attention_is_value_projection(rng):
    x = rng.normal(size=(1, 8))
    ws = [rng.normal(size=(8, 4)) for _ in range(3)]
    np.testing.assert_allclose(attend(x, x, x, AttentionHeadParams(*ws)).data, x @ ws[2], atol=1e-12)


def test_masked_keys_get_zero_weight(rng):
    x = rng.normal(size=(4, 8))
    ws = [rng.normal(size=(8, 4)) for _ in range(3)]
    mask = np.array([True, True, False, True])[None, :]
    _, weights = attend(x, x, x, AttentionHeadParams(*ws), mask, return_weights=True)
    assert np.all(weights[:, 2] == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_encoder_is_permutation_equivariant(n, seed):
    cfg = EncoderConfig.desk(d_feat=6, depth=2)
    _, blocks = blocks_for(cfg, seed % 7)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, cfg.d_model))
    perm = rng.permutation(n)
    out = encode(u, blocks).data
    np.testing.assert_allclose(encode(u[perm], blocks).data, out[perm], atol=1e-10)


def test_encoder_output_rows_are_normalised(rng):
    cfg = EncoderConfig.desk()
    _, blocks = blocks_for(cfg)
    out = encode(rng.normal(size=(6, cfg.d_model)), blocks).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_padding_regions_do_not_change_real_rows(rng):
    cfg = EncoderConfig.desk()
    _, blocks = blocks_for(cfg)
    real = rng.normal(size=(3, cfg.d_model))
    padded = np.concatenate([real, rng.normal(size=(2, cfg.d_model))])[None]
    mask = np.array([[True, True, True, False, False]])
    out = encode(padded, blocks, mask).data[0, :3]
    np.testing.assert_allclose(out, encode(real, blocks).data, atol=1e-12)


def test_batched_encode_equals_per_image(rng):
    cfg = EncoderConfig.desk()
    _, blocks = blocks_for(cfg)
    batch = rng.normal(size=(3, 4, cfg.d_model))
    out = encode(batch, blocks).data
    for i in range(3):
        np.testing.assert_allclose(out[i], encode(batch[i], blocks).data, atol=1e-12)


def test_encode_requires_blocks():
    with pytest.raises(ValueError):
        encode(np.zeros((2, 4)), [])


def test_parameter_names_and_count():
    cfg = EncoderConfig.desk(depth=3)
    params = init_encoder(cfg, np.random.default_rng(0))
    assert "enc.2.attn.head3.wv" in params and "enc.0.ln2.bias" in params
    assert len(bind_encoder_blocks(wrap_all(params))) == 3
    per_block = 3 * 4 * 32 * 8 + 32 * 32 + 2 * 32 + 32 * 64 + 64 + 64 * 32 + 32 + 2 * 32
    assert sum(v.size for v in params.values()) == 16 * 32 + 32 + 3 * per_block


def test_end_to_end_gradient(rng):
    cfg = EncoderConfig(d_feat=5, d_model=8, n_heads=2, d_head=4, d_ffn=12, depth=2)
    params = init_encoder(cfg, rng)
    feats = rng.normal(size=(3, 5))
    readout = rng.normal(size=(3, 8))

    def loss_wrt(name):
        def fn(t):
            bound = wrap_all(params)
            bound[name] = t
            u0 = project_features(feats, bound["enc.proj.w"], bound["enc.proj.b"])
            return reduce_sum(mul(encode(u0, bind_encoder_blocks(bound)), readout))
        return fn

    for name in ("enc.proj.w", "enc.0.attn.head1.wk", "enc.1.ffn.g1", "enc.1.ln2.gain"):
        assert grad_check(loss_wrt(name), params[name], 1e-5) < 1e-4, name


def test_block_gradient_wrt_input(rng):
    cfg = EncoderConfig(d_feat=5, d_model=8, n_heads=2, d_head=4, d_ffn=12, depth=1)
    _, blocks = blocks_for(cfg)
    w = rng.normal(size=(4, 8))
    assert grad_check(lambda t: reduce_sum(mul(encoder_block(t, blocks[0]), w)),
                      rng.normal(size=(4, 8)), 1e-5) < 1e-4

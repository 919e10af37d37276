import numpy as np
import pytest

from filterxl import tensor as tn
from filterxl.encoder import (
    AttentionMask,
    EncoderConfig,
    embed,
    encode,
    encoder_layer,
    init_encoder,
    multi_head_attention,
    run_stack,
)
from filterxl.errors import ConfigError, DataError, DimensionError, LengthError, VocabularyError
from filterxl.model import FilterModel
from filterxl.tensor import Tensor

from conftest import tiny_config

CFG = EncoderConfig(vocab_size=20, d_model=8, n_heads=2, d_ff=16, max_positions=10, n_layers=3)


@pytest.fixture
def weights():
    return init_encoder(CFG, seed=3)


def _np_layer_norm_cols(x, eps=1e-5):
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=10, d_model=6, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=10, n_layers=0)


def test_embedding_at_position_zero(weights):
    h = embed([5], CFG, weights).data
    expected = weights.tok_emb.data[:, 5] + weights.pos_emb.data[:, 0]
    assert np.array_equal(h[:, 0], expected)


def test_identical_tokens_differ_by_position_delta(weights):
    h = embed([7, 7], CFG, weights).data
    np.testing.assert_allclose(h[:, 1] - h[:, 0], weights.pos_emb.data[:, 1] - weights.pos_emb.data[:, 0], atol=1e-15)


def test_each_stream_restarts_positions(weights):
    s, t = embed([3, 4, 5], CFG, weights).data, embed([6, 7], CFG, weights).data
    pos = weights.pos_emb.data
    assert np.array_equal(s, weights.tok_emb.data[:, [3, 4, 5]] + pos[:, :3])
    assert np.array_equal(t, weights.tok_emb.data[:, [6, 7]] + pos[:, :2])


def test_embed_errors(weights):
    with pytest.raises(VocabularyError):
        embed([1, 20], CFG, weights)
    with pytest.raises(LengthError):
        embed([1] * 11, CFG, weights)
    with pytest.raises(DataError):
        embed([], CFG, weights)


def test_single_position_attention_is_output_of_value(weights):
    w = weights.layers[0]
    h = Tensor(np.random.default_rng(0).normal(size=(8, 1)))
    out = multi_head_attention(h, AttentionMask(np.ones((1, 1))), w, CFG.n_heads).data
    expected = w["attn.o.weight"].data @ (w["attn.v.weight"].data @ h.data + w["attn.v.bias"].data) + w["attn.o.bias"].data
    np.testing.assert_allclose(out, expected, atol=1e-14)
    probs = tn.attention_probs(h.data, h.data, CFG.n_heads)
    assert np.all(probs == 1.0)


def test_identical_keys_give_uniform_weights():
    k = np.tile(np.random.default_rng(1).normal(size=(8, 1)), (1, 5))
    q = np.random.default_rng(2).normal(size=(8, 5))
    np.testing.assert_allclose(tn.attention_probs(q, k, 2), np.full((2, 5, 5), 0.2), atol=1e-15)


def test_masked_keys_get_negligible_weight_and_no_gradient():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.normal(size=(4, 4)), requires_grad=True) for _ in range(3))
    mask = AttentionMask.from_tokens([1, 5, 0, 6])
    probs = tn.attention_probs(q.data, k.data, 2, mask.additive())
    assert np.all(probs[:, :, 2] < 1e-30)
    with tn.Tape() as tape:
        loss = tn.sum_all(tn.mul(tn.attention(q, k, v, 2, mask.additive()), Tensor(rng.normal(size=(4, 4)))))
    tape.backward(loss)
    assert np.all(v.grad[:, 2] == 0.0) and np.all(k.grad[:, 2] == 0.0)


def test_attention_gradient_single_head():
    cfg = EncoderConfig(vocab_size=5, d_model=4, n_heads=1, d_ff=8, max_positions=4, n_layers=1)
    w = init_encoder(cfg, seed=9).layers[0]
    h = Tensor(np.random.default_rng(4).normal(size=(4, 3)), requires_grad=True)
    mask = AttentionMask(np.ones((3, 3)))
    proj = Tensor(np.random.default_rng(5).normal(size=(4, 3)))
    params = [h] + [w[n] for n in ("attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight")]
    err = tn.finite_diff_check(lambda _: tn.sum_all(tn.mul(multi_head_attention(h, mask, w, 1), proj)), params)
    assert err < 1e-6


def test_mask_dimension_mismatch(weights):
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(np.ones((8, 3))), AttentionMask(np.ones((2, 2))), weights.layers[0], 2)
    with pytest.raises(DataError):
        AttentionMask.from_tokens([0, 0])


def test_zeroed_output_projections_reduce_layer_to_double_norm(weights):
    w = weights.layers[0]
    for name in ("attn.o.weight", "attn.o.bias", "ffn.out.weight", "ffn.out.bias"):
        w.params[name] = Tensor(np.zeros_like(w[name].data))
    h = np.random.default_rng(6).normal(size=(8, 4))
    out = encoder_layer(Tensor(h), AttentionMask(np.ones((4, 4))), w, 2).data
    np.testing.assert_allclose(out, _np_layer_norm_cols(_np_layer_norm_cols(h)), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_layer_preserves_shape(weights, n):
    h = Tensor(np.random.default_rng(n).normal(size=(8, n)))
    assert encoder_layer(h, AttentionMask(np.ones((n, n))), weights.layers[1], 2).shape == (8, n)


def test_run_stack_composition_is_exact(weights):
    tokens = [1, 4, 9, 2, 11]
    h = embed(tokens, CFG, weights)
    mask = AttentionMask.from_tokens(tokens)
    full = run_stack(h, mask, weights, 0, 3, 2).data
    for split in range(4):
        part = run_stack(run_stack(h, mask, weights, 0, split, 2), mask, weights, split, 3, 2).data
        assert part.tobytes() == full.tobytes()
    assert encode(tokens, CFG, weights).data.tobytes() == full.tobytes()


def test_run_stack_empty_range_and_bounds(weights):
    h = Tensor(np.ones((8, 2)))
    assert run_stack(h, AttentionMask(np.ones((2, 2))), weights, 2, 2, 2) is h
    with pytest.raises(IndexError):
        run_stack(h, AttentionMask(np.ones((2, 2))), weights, 1, 4, 2)


@pytest.mark.parametrize("layer", [0, 1])
def test_shared_layers_encode_both_streams(layer):
    model = FilterModel.init(tiny_config(m=1, k=0), seed=11)
    S, T = [1, 5, 9, 12], [1, 70, 80]
    before = model.forward_pair(S, T)
    w = model.encoder.layers[layer]["ffn.in.weight"]
    # a constant shift would be cancelled by the zero-mean normalised input
    w.data = w.data + np.random.default_rng(layer).normal(scale=0.1, size=w.shape)
    after = model.forward_pair(S, T)
    assert not np.allclose(before.h_s_domain.data, after.h_s_domain.data)
    assert not np.allclose(before.h_t_domain.data, after.h_t_domain.data)


def test_encoding_is_deterministic():
    a = encode([1, 3, 4], CFG, init_encoder(CFG, 5)).data
    b = encode([1, 3, 4], CFG, init_encoder(CFG, 5)).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != encode([1, 3, 4], CFG, init_encoder(CFG, 6)).data.tobytes()


def test_init_scale_and_named_parameters(weights):
    bound = 1 / np.sqrt(8)
    assert np.abs(weights.tok_emb.data).max() <= bound
    names = [n for n, _ in weights.named_parameters()]
    assert names[:2] == ["embed.tok", "embed.pos"]
    assert "layer.2.ln2.bias" in names and len(names) == 2 + 3 * 16

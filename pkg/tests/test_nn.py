import numpy as np
import pytest

from connalign import reference as ref
from connalign.autodiff import Tensor, grad_check
from connalign.errors import ConfigError, ShapeError
from connalign.nn import LayerNorm, Linear, MultiHeadSelfAttention, TransformerLayer, trunc_normal
from connalign.verify import _weighted_sum


def perturb(module, rng, scale=0.5):
    for _, p in module.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def test_linear_is_affine(rng):
    lin = Linear(3, 2, rng)
    lin.bias.data[...] = [0.5, -1.0]
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ lin.weight.data.T + lin.bias.data, atol=1e-15)
    with pytest.raises(ShapeError):
        lin(Tensor(np.ones((4, 5))))


def test_msa_single_token(rng):
    msa = MultiHeadSelfAttention(4, 2, rng)
    perturb(msa, rng)
    x = rng.standard_normal((1, 4))
    want = x @ msa.w_v.weight.data.T @ msa.w_o.weight.data.T
    np.testing.assert_allclose(msa(Tensor(x)).data, want, atol=1e-14)


def test_msa_zero_projections(rng):
    msa = MultiHeadSelfAttention(4, 2, rng)
    msa.zero_()
    np.testing.assert_array_equal(msa(Tensor(rng.standard_normal((3, 4)))).data, np.zeros((3, 4)))


def test_msa_matches_per_head_loops(rng):
    msa = MultiHeadSelfAttention(4, 2, rng)
    perturb(msa, rng)
    x = rng.standard_normal((3, 4))
    w = [m.weight.data for m in (msa.w_q, msa.w_k, msa.w_v, msa.w_o)]
    assert np.abs(msa(Tensor(x)).data - ref.msa(x, *w, heads=2)).max() < 1e-10
    pad = [False, True, False]
    assert np.abs(msa(Tensor(x), np.array(pad)).data - ref.msa(x, *w, heads=2, key_padding=pad)).max() < 1e-10


def test_msa_head_divisibility(rng):
    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(6, 4, rng)


def test_msa_rows_sum_to_one_under_masking(rng):
    msa = MultiHeadSelfAttention(8, 2, rng)
    perturb(msa, rng)
    pad = np.array([[False, False, True, True], [False, True, False, True]])
    msa(Tensor(rng.standard_normal((2, 4, 8))), pad)
    attn = msa.last_attention
    assert np.abs(attn.sum(axis=-1) - 1.0).max() <= 1e-12
    assert np.all(attn[0, :, :, 2:] == 0.0)


def test_layer_zero_weights_is_identity(rng):
    layer = TransformerLayer(8, 2, rng)
    layer.msa.zero_()
    layer.mlp.zero_()
    x = rng.standard_normal((5, 8))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_layer_matches_block_oracle(rng):
    layer = TransformerLayer(4, 2, rng)
    perturb(layer, rng)
    x = rng.standard_normal((3, 4))
    p = {
        "ln1_g": layer.ln1.gamma.data, "ln1_b": layer.ln1.beta.data,
        "wq": layer.msa.w_q.weight.data, "wk": layer.msa.w_k.weight.data,
        "wv": layer.msa.w_v.weight.data, "wo": layer.msa.w_o.weight.data,
        "ln2_g": layer.ln2.gamma.data, "ln2_b": layer.ln2.beta.data,
        "fc1_w": layer.mlp.fc1.weight.data, "fc1_b": layer.mlp.fc1.bias.data,
        "fc2_w": layer.mlp.fc2.weight.data, "fc2_b": layer.mlp.fc2.bias.data,
    }
    assert np.abs(layer(Tensor(x)).data - ref.transformer_layer(x, p, 2)).max() < 1e-10


def test_layer_padding_invariance(rng):
    layer = TransformerLayer(8, 2, rng)
    perturb(layer, rng, 0.3)
    real = rng.standard_normal((4, 8))
    padded = np.concatenate([real, rng.standard_normal((3, 8)) * 10])
    pad = np.array([False] * 4 + [True] * 3)
    a = layer(Tensor(real)).data
    b = layer(Tensor(padded), pad).data[:4]
    assert np.abs(a - b).max() <= 1e-10


def test_layer_shape_preserved(rng):
    layer = TransformerLayer(8, 4, rng)
    assert layer(Tensor(rng.standard_normal((2, 6, 8)))).shape == (2, 6, 8)


def test_layer_gradients(rng):
    layer = TransformerLayer(4, 2, rng)
    perturb(layer, rng, 0.3)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda: _weighted_sum(layer(x), w), [x] + layer.parameters()) < 1e-4


def test_init_deterministic():
    a = TransformerLayer(8, 2, np.random.default_rng(5)).state_dict()
    b = TransformerLayer(8, 2, np.random.default_rng(5)).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_init_statistics():
    w = trunc_normal(np.random.default_rng(0), (100, 100))
    assert 0.015 <= w.std() <= 0.025
    assert np.abs(w).max() <= 0.04


def test_init_norm_and_bias_values(rng):
    layer = TransformerLayer(8, 2, rng)
    np.testing.assert_array_equal(layer.ln1.gamma.data, np.ones(8))
    np.testing.assert_array_equal(layer.ln2.beta.data, np.zeros(8))
    np.testing.assert_array_equal(layer.mlp.fc1.bias.data, np.zeros(32))
    assert layer.msa.w_q.bias is None


def test_mlp_is_four_times_wider(rng):
    layer = TransformerLayer(8, 2, rng)
    assert layer.mlp.fc1.weight.shape == (32, 8)
    assert layer.mlp.fc2.weight.shape == (8, 32)


def test_state_dict_round_trip(rng):
    a, b = TransformerLayer(8, 2, rng), TransformerLayer(8, 2, rng)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.standard_normal((3, 8)))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    bad = a.state_dict()
    bad["ln1.gamma"] = np.ones(3)
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)


def test_layernorm_module(rng):
    ln = LayerNorm(4)
    out = ln(Tensor(rng.standard_normal((2, 4)))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-12

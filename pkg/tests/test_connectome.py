import numpy as np
import pytest

from connalign import reference as ref
from connalign.autodiff import Recording, Tensor
from connalign.connectome import ConnectomeEncoder, SCMatrix, patchify, transform_values
from connalign.errors import ConfigError, ValidationError


def random_sc(rng, n=8):
    v = np.triu(rng.poisson(30.0, (n, n)).astype(float), 1)
    return SCMatrix(v + v.T)


def nonzero(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


@pytest.mark.parametrize(
    "values, where",
    [
        ([[0, 5], [4, 0]], r"\(0,1\)"),
        ([[0, -1], [-1, 0]], r"\(0,1\)"),
        ([[1, 0], [0, 0]], r"\(0,0\)"),
        ([[0, np.nan], [np.nan, 0]], r"\(0,1\)"),
    ],
)
def test_sc_invariants_name_entry(values, where):
    with pytest.raises(ValidationError, match=where):
        SCMatrix(np.array(values, dtype=float))


def test_sc_must_be_square():
    with pytest.raises(ValidationError):
        SCMatrix(np.zeros((2, 3)))


def test_sc_default_region_names():
    sc = SCMatrix(np.zeros((3, 3)))
    assert sc.region_names == ["R000", "R001", "R002"] and sc.region_count == 3


def test_patchify_zero_matrix():
    np.testing.assert_array_equal(patchify(SCMatrix(np.zeros((3, 3)))), np.zeros((3, 3)))


def test_patchify_permutation(rng):
    sc = random_sc(rng)
    perm = rng.permutation(8)
    p = np.eye(8)[perm]
    permuted = SCMatrix(p @ sc.values @ p.T)
    # permuting regions moves both the patch rows and the columns within each patch
    np.testing.assert_allclose(patchify(permuted), p @ patchify(sc) @ p.T, atol=1e-12)


def test_patchify_direct_oracle():
    v = np.zeros((3, 3))
    v[0, 1] = v[1, 0] = 100.0
    got = patchify(SCMatrix(v))
    logs = [np.log1p(x) for x in v.ravel()]
    mu = sum(logs) / 9
    sd = (sum((x - mu) ** 2 for x in logs) / 9) ** 0.5
    assert abs(got[0, 1] - (np.log1p(100.0) - mu) / sd) < 1e-12
    assert abs(got.mean()) < 1e-12 and abs(got.std() - 1.0) < 1e-12


def test_raw_transform_passthrough(rng):
    sc = random_sc(rng)
    np.testing.assert_array_equal(patchify(sc, "raw"), sc.values)
    with pytest.raises(ConfigError):
        transform_values(sc.values, "zscore")


def test_embed_affine_floor(rng):
    enc = ConnectomeEncoder(4, 8, 1, 2, rng)
    enc.zero_()
    enc.patch_embed.bias.data[...] = np.arange(8.0)
    out = enc.embed_patches(np.zeros((4, 4))).data
    np.testing.assert_array_equal(out[1:], np.tile(np.arange(8.0), (4, 1)))


def test_embed_matches_row_oracle(rng):
    enc = ConnectomeEncoder(4, 8, 1, 2, rng)
    nonzero(enc, rng)
    patches = rng.standard_normal((4, 4))
    out = enc.embed_patches(patches).data
    np.testing.assert_array_equal(out[0], enc.class_token.data)
    w, b, r = enc.patch_embed.weight.data, enc.patch_embed.bias.data, enc.region_embed.data
    for i in range(4):
        want = [sum(patches[i][k] * w[d][k] for k in range(4)) + b[d] + r[i][d] for d in range(8)]
        assert np.abs(out[i + 1] - want).max() < 1e-12


def test_class_token_always_first(rng):
    enc = ConnectomeEncoder(4, 8, 1, 2, rng)
    for _ in range(3):
        out = enc.embed_patches(rng.standard_normal((2, 4, 4))).data
        np.testing.assert_array_equal(out[:, 0], np.tile(enc.class_token.data, (2, 1)))


def test_embed_width_mismatch(rng):
    enc = ConnectomeEncoder(4, 8, 1, 2, rng)
    with pytest.raises(ConfigError):
        enc.embed_patches(np.zeros((5, 5)))


def test_encode_shapes(rng):
    enc = ConnectomeEncoder(8, 16, 2, 2, rng)
    x_local, x_global = enc.encode(random_sc(rng))
    assert x_local.shape == (8, 16) and x_global.shape == (1, 16)


def test_zero_weight_encoder_returns_class_token(rng):
    enc = ConnectomeEncoder(8, 16, 2, 2, rng)
    token = enc.class_token.data.copy()
    for layer in enc.layers:
        layer.msa.zero_()
        layer.mlp.zero_()
    _, x_global = enc.encode(random_sc(rng))
    np.testing.assert_array_equal(x_global.data[0], token)


def test_encode_matches_block_replay(rng):
    enc = ConnectomeEncoder(4, 4, 2, 2, rng)
    nonzero(enc, rng)
    sc = random_sc(rng, 4)
    patches = patchify(sc)
    h = [list(enc.class_token.data)]
    h += list(ref.linear(patches, enc.patch_embed.weight.data, enc.patch_embed.bias.data) + enc.region_embed.data)
    h = np.array(h)
    for layer in enc.layers:
        msa = layer.msa
        p = {
            "ln1_g": layer.ln1.gamma.data, "ln1_b": layer.ln1.beta.data,
            "wq": msa.w_q.weight.data, "wk": msa.w_k.weight.data, "wv": msa.w_v.weight.data, "wo": msa.w_o.weight.data,
            "ln2_g": layer.ln2.gamma.data, "ln2_b": layer.ln2.beta.data,
            "fc1_w": layer.mlp.fc1.weight.data, "fc1_b": layer.mlp.fc1.bias.data,
            "fc2_w": layer.mlp.fc2.weight.data, "fc2_b": layer.mlp.fc2.bias.data,
        }
        h = ref.transformer_layer(h, p, 2)
    x_local, x_global = enc.encode(sc)
    assert np.abs(x_local.data - h[1:]).max() < 1e-10
    assert np.abs(x_global.data[0] - h[0]).max() < 1e-10


def test_global_depends_on_every_row(rng):
    enc = ConnectomeEncoder(6, 8, 1, 2, rng)
    nonzero(enc, rng)
    sc = random_sc(rng, 6)
    base = enc.encode(sc)[1].data
    for i in range(6):
        v = sc.values.copy()
        j = (i + 1) % 6
        v[i, j] += 1
        v[j, i] += 1
        assert np.abs(enc.encode(SCMatrix(v))[1].data - base).max() > 0


def test_class_token_gradient_nonzero(rng):
    enc = ConnectomeEncoder(6, 8, 1, 2, rng)
    with Recording() as rec:
        _, xg = enc.encode(random_sc(rng, 6))
        rec.backward((xg * Tensor(rng.standard_normal((1, 8)))).sum())
    assert np.abs(enc.class_token.grad).max() > 0

"""Patch embedding, transformer layers, and token/map conversions."""

import numpy as np
import pytest

from cardioseg.tensor import ShapeError, Tensor
from cardioseg.vit import PatchEmbedding, ViTLayer, tokens_to_map

from _gradcheck import check_grads


def make_embed(rng, channels=1, p=4, dim=8, grid=(4, 4)):
    return PatchEmbedding(channels, p, dim, grid[0], grid[1], rng)


def test_token_count():
    rng = np.random.default_rng(0)
    pe = make_embed(rng)  # 16x16 input, 4x4 patches
    tokens = pe(Tensor(rng.standard_normal((1, 16, 16))))
    assert tokens.shape == (16, 8)


def test_embed_rejects_wrong_extents():
    rng = np.random.default_rng(1)
    pe = make_embed(rng)
    with pytest.raises(ShapeError):
        pe(Tensor(np.ones((1, 16, 12))))
    with pytest.raises(ShapeError):
        pe(Tensor(np.ones((2, 16, 16))))


def test_zero_projection_and_positions_give_zero_tokens():
    rng = np.random.default_rng(2)
    pe = make_embed(rng)
    pe.proj.weight.data[...] = 0.0
    pe.proj.bias.data[...] = 0.0
    pe.pos.data[...] = 0.0
    tokens = pe(Tensor(rng.standard_normal((1, 16, 16))))
    np.testing.assert_array_equal(tokens.data, 0.0)


def test_patch_locality():
    # Two inputs differing only inside one patch differ only in that token
    # (positions zeroed so the comparison is on projections alone).
    rng = np.random.default_rng(3)
    pe = make_embed(rng)
    pe.pos.data[...] = 0.0
    x = rng.standard_normal((1, 16, 16))
    y = x.copy()
    y[0, 4:8, 8:12] += 1.0  # patch grid cell (1, 2) -> token 6
    tx = pe(Tensor(x)).data
    ty = pe(Tensor(y)).data
    changed = np.where(np.any(tx != ty, axis=1))[0]
    np.testing.assert_array_equal(changed, [6])


def test_patch_flattening_is_channel_major():
    # With an identity projection, each token is its patch flattened with
    # channel varying slowest.
    rng = np.random.default_rng(4)
    pe = PatchEmbedding(2, 2, 8, 2, 2, rng)
    pe.proj.weight.data[...] = np.eye(8)
    pe.proj.bias.data[...] = 0.0
    pe.pos.data[...] = 0.0
    x = rng.standard_normal((2, 4, 4))
    tokens = pe(Tensor(x)).data
    for cell_r in range(2):
        for cell_c in range(2):
            patch = x[:, 2 * cell_r:2 * cell_r + 2, 2 * cell_c:2 * cell_c + 2]
            np.testing.assert_array_equal(
                tokens[cell_r * 2 + cell_c], patch.reshape(-1)
            )


def test_tokens_to_map_index_placement():
    dim = 3
    tokens = np.arange(12.0).reshape(12, 1) * np.ones((1, dim))
    out = tokens_to_map(Tensor(tokens), 3, 4)
    assert out.shape == (dim, 3, 4)
    for t in range(12):
        assert out.data[0, t // 4, t % 4] == t


def test_tokens_map_roundtrip():
    rng = np.random.default_rng(5)
    pe = PatchEmbedding(3, 1, 3, 4, 4, rng)  # p=1: tokens are pixels
    pe.proj.weight.data[...] = np.eye(3)
    pe.proj.bias.data[...] = 0.0
    pe.pos.data[...] = 0.0
    x = rng.standard_normal((3, 4, 4))
    back = tokens_to_map(pe(Tensor(x)), 4, 4)
    np.testing.assert_array_equal(back.data, x)


def test_tokens_to_map_count_mismatch():
    with pytest.raises(ShapeError):
        tokens_to_map(Tensor(np.ones((10, 4))), 3, 4)


def test_vit_layer_preserves_shape():
    rng = np.random.default_rng(6)
    layer = ViTLayer(32, 4, rng)
    out = layer(Tensor(rng.standard_normal((9, 32))))
    assert out.shape == (9, 32)


def zero_residual_branches(layer):
    layer.attn.out_proj.weight.data[...] = 0.0
    layer.attn.out_proj.bias.data[...] = 0.0
    layer.mlp_out.weight.data[...] = 0.0
    layer.mlp_out.bias.data[...] = 0.0


@pytest.mark.parametrize("n", [1, 3])
def test_zeroed_stack_is_exact_identity(n):
    rng = np.random.default_rng(7)
    layers = [ViTLayer(8, 2, rng) for _ in range(n)]
    for layer in layers:
        zero_residual_branches(layer)
    x = rng.standard_normal((5, 8))
    cur = Tensor(x)
    for layer in layers:
        cur = layer(cur)
    np.testing.assert_array_equal(cur.data, x)


def test_layer_token_permutation_equivariance():
    # Self-attention plus tokenwise sublayers commute with token reordering.
    rng = np.random.default_rng(8)
    layer = ViTLayer(8, 2, rng)
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    out = layer(Tensor(x)).data
    out_perm = layer(Tensor(x[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


def test_stack_grads():
    rng = np.random.default_rng(9)
    layers = [ViTLayer(8, 2, rng) for _ in range(2)]
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    params = [t for layer in layers for _, t in layer.named_params()]
    proj = rng.standard_normal((4, 8))

    def fn(*ts):
        cur = ts[0]
        for layer in layers:
            cur = layer(cur)
        return (cur * proj).sum()

    check_grads(fn, [x] + params, tol=2e-4)


def test_patch_embedding_grads():
    rng = np.random.default_rng(10)
    pe = PatchEmbedding(2, 2, 6, 2, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    params = [t for _, t in pe.named_params()]
    proj = rng.standard_normal((4, 6))
    check_grads(lambda *ts: (pe(ts[0]) * proj).sum(), [x] + params)

import numpy as np
import pytest

from tapfm.autograd import Graph, ShapeError, Value, finite_diff_gradient
from tapfm.vit import (
    TOY_CONFIG,
    ViTConfig,
    cls_attention_scores,
    extract_features,
    forward_tiles,
    init_params,
    patchify_embed,
)


def toy_tiles(K, seed=0, cfg=TOY_CONFIG):
    return np.random.default_rng(seed).random((K, cfg.tile_size, cfg.tile_size, cfg.channels))


def params64(cfg=TOY_CONFIG, seed=0):
    return init_params(cfg, seed=seed, dtype=np.float64)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ViTConfig(tile_size=30, patch_size=8)
    with pytest.raises(ValueError, match="heads"):
        ViTConfig(embed_dim=30, heads=4)
    cfg = ViTConfig()
    assert (cfg.num_patches, cfg.seq_len, cfg.head_dim) == (16, 17, 16)


def test_sequence_length_single_channel():
    cfg = ViTConfig(layers=1, heads=1, embed_dim=4, patch_size=4, tile_size=8, channels=1, mlp_ratio=1)
    seq = patchify_embed(np.zeros((2, 8, 8, 1)), init_params(cfg), cfg, Graph())
    assert seq.shape == (2, 5, 4)


def test_zero_projection_gives_positional_embeddings():
    p = params64()
    p["patch_embed.weight"] = Value(np.zeros_like(p["patch_embed.weight"].data), requires_grad=True)
    seq = patchify_embed(np.zeros((3, 8, 8, 3)), p, TOY_CONFIG, Graph())
    for k in range(3):
        np.testing.assert_array_equal(seq.data[k], p["pos_embed"].data)


def test_identical_tiles_identical_tokens():
    t = toy_tiles(1)
    seq = patchify_embed(np.concatenate([t, t]), params64(), TOY_CONFIG, Graph())
    np.testing.assert_array_equal(seq.data[0], seq.data[1])


def test_rejects_bad_shapes_and_empty_bag():
    with pytest.raises(ShapeError):
        forward_tiles(np.zeros((2, 9, 9, 3)), params64(), TOY_CONFIG)
    with pytest.raises(ValueError, match="empty bag"):
        forward_tiles(np.zeros((0, 8, 8, 3)), params64(), TOY_CONFIG)


def test_output_shapes_and_row_sums():
    cfg = TOY_CONFIG
    out = forward_tiles(toy_tiles(5), params64(), cfg)
    assert out.features.shape == (5, cfg.embed_dim)
    assert out.cls_attention.shape == (5, cfg.heads, cfg.num_patches)
    rows = out.cls_attention.data.sum(axis=-1) + out.cls_self
    np.testing.assert_allclose(rows, 1.0, atol=1e-5)
    assert np.all((out.cls_attention.data >= 0) & (out.cls_attention.data <= 1))


def test_default_config_row_sums_float32():
    cfg = ViTConfig()
    out = forward_tiles(np.random.default_rng(0).random((3, 32, 32, 3), dtype=np.float32), init_params(cfg), cfg)
    np.testing.assert_allclose(out.cls_attention.data.sum(axis=-1) + out.cls_self, 1.0, atol=1e-5)


def test_score_is_mean_over_heads_and_patches():
    out = forward_tiles(toy_tiles(4), params64(), TOY_CONFIG)
    a = cls_attention_scores(out).data
    np.testing.assert_allclose(a, out.cls_attention.data.mean(axis=(1, 2)))
    assert np.all((a > 0) & (a <= 1))


def test_score_arithmetic_example():
    g = Graph()
    from tapfm.vit import BackboneOutput

    att = Value(np.array([[[0.2, 0.8], [0.4, 0.6]]]))
    out = BackboneOutput(features=Value(np.zeros((1, 2))), cls_attention=att, cls_self=np.zeros((1, 2)), graph=g)
    assert cls_attention_scores(out).data[0] == pytest.approx(0.5)


def test_permuting_tiles_permutes_outputs():
    tiles = toy_tiles(6)
    perm = np.random.default_rng(3).permutation(6)
    a = forward_tiles(tiles, params64(), TOY_CONFIG)
    b = forward_tiles(tiles[perm], params64(), TOY_CONFIG)
    np.testing.assert_allclose(b.features.data, a.features.data[perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.cls_attention.data, a.cls_attention.data[perm], rtol=0, atol=1e-12)


def test_tile_independence_bitwise():
    tiles = toy_tiles(4)
    before = forward_tiles(tiles, params64(), TOY_CONFIG).features.data.copy()
    tiles[2] = 1.0 - tiles[2]
    after = forward_tiles(tiles, params64(), TOY_CONFIG).features.data
    for i in (0, 1, 3):
        np.testing.assert_array_equal(before[i], after[i])
    assert not np.array_equal(before[2], after[2])


def test_feature_gradients_match_finite_differences():
    cfg = TOY_CONFIG
    tiles = toy_tiles(2, seed=5)
    p = params64(seed=1)
    w = np.random.default_rng(2).normal(size=(2, cfg.embed_dim))

    def loss(params, graph):
        out = forward_tiles(tiles, params, cfg, graph)
        return graph.sum(graph.mul(out.features, w))

    g = Graph()
    g.backward(loss(p, g))
    for name in ("blocks.1.attn.qkv.weight", "patch_embed.weight", "norm.bias", "cls_token"):
        flat_idx = np.random.default_rng(4).choice(p[name].data.size, size=6, replace=False)

        def f(x, name=name):
            q = dict(p)
            q[name] = Value(x)
            return float(loss(q, Graph(enabled=False)).data)

        base = p[name].data.copy()
        num = finite_diff_gradient(f, base).reshape(-1)[flat_idx]
        ana = p[name].grad.reshape(-1)[flat_idx]
        assert np.max(np.abs(ana - num)) / max(np.max(np.abs(num)), 1e-8) <= 1e-4


def test_attention_score_reaches_attention_projection():
    p = params64()
    g = Graph()
    out = forward_tiles(toy_tiles(3), p, TOY_CONFIG, g)
    g.backward(g.sum(cls_attention_scores(out)))
    assert np.abs(p["blocks.1.attn.qkv.weight"].grad).max() > 0


def test_extract_features_matches_graph_forward_in_chunks():
    tiles = toy_tiles(7)
    p = params64()
    f, s = extract_features(tiles, p, TOY_CONFIG, chunk=3)
    out = forward_tiles(tiles, p, TOY_CONFIG)
    np.testing.assert_allclose(f, out.features.data, atol=1e-12)
    np.testing.assert_allclose(s, cls_attention_scores(out).data, atol=1e-12)


def test_init_is_seeded():
    a, b = init_params(TOY_CONFIG, seed=3), init_params(TOY_CONFIG, seed=3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["pos_embed"].data, init_params(TOY_CONFIG, seed=4)["pos_embed"].data)
    assert np.all(np.abs(a["blocks.0.attn.qkv.weight"].data) <= 0.04)
    assert not a["cls_token"].data.any()

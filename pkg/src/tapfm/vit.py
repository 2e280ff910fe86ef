"""Small pre-norm vision transformer exposing last-layer CLS attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Graph, ShapeError, Value


@dataclass(frozen=True)
class ViTConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 64
    patch_size: int = 8
    tile_size: int = 32
    channels: int = 3
    mlp_ratio: int = 4
    # fixed pixel standardisation applied before the patch projection
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.tile_size % self.patch_size:
            raise ValueError(
                f"tile_size {self.tile_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if min(self.layers, self.heads, self.embed_dim, self.channels, self.mlp_ratio) < 1:
            raise ValueError("ViTConfig fields must be positive")
        if not self.pixel_std > 0:
            raise ValueError("pixel_std must be positive")

    @property
    def num_patches(self) -> int:
        return (self.tile_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


TOY_CONFIG = ViTConfig(layers=2, heads=2, embed_dim=16, patch_size=4, tile_size=8, channels=3, mlp_ratio=2)


@dataclass
class BackboneOutput:
    """Per-bag backbone result.

    ``cls_attention`` is K×H×N: last-layer attention from the CLS query to
    each patch token. ``cls_self`` (K×H, plain array) is the CLS-to-CLS entry
    of the same row, kept so that full rows can be checked to sum to one.
    """

    features: Value
    cls_attention: Value
    cls_self: np.ndarray
    graph: Graph


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict[str, Value]:
    """Randomly initialised backbone parameters, keyed by dotted name."""
    rng = np.random.default_rng(seed)
    D, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    arrays: dict[str, np.ndarray] = {
        "patch_embed.weight": _trunc_normal(rng, (patch_dim, D), 0.02),
        "patch_embed.bias": np.zeros(D),
        "cls_token": np.zeros(D),
        "pos_embed": _trunc_normal(rng, (cfg.seq_len, D), 0.02),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        arrays.update({
            p + "norm1.weight": np.ones(D),
            p + "norm1.bias": np.zeros(D),
            p + "attn.qkv.weight": _trunc_normal(rng, (D, 3 * D), 0.02),
            p + "attn.qkv.bias": np.zeros(3 * D),
            p + "attn.proj.weight": _trunc_normal(rng, (D, D), 0.02),
            p + "attn.proj.bias": np.zeros(D),
            p + "norm2.weight": np.ones(D),
            p + "norm2.bias": np.zeros(D),
            p + "mlp.fc1.weight": _trunc_normal(rng, (D, hidden), 0.02),
            p + "mlp.fc1.bias": np.zeros(hidden),
            p + "mlp.fc2.weight": _trunc_normal(rng, (hidden, D), 0.02),
            p + "mlp.fc2.bias": np.zeros(D),
        })
    arrays["norm.weight"] = np.ones(D)
    arrays["norm.bias"] = np.zeros(D)
    return {k: Value(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def _check_tiles(tiles: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    tiles = np.asarray(tiles)
    if tiles.ndim != 4 or tiles.shape[1:] != (cfg.tile_size, cfg.tile_size, cfg.channels):
        raise ShapeError(
            f"tiles have shape {tiles.shape}, expected (K, {cfg.tile_size}, {cfg.tile_size}, {cfg.channels})"
        )
    if tiles.shape[0] == 0:
        raise ValueError("empty bag")
    return tiles


def patchify(tiles: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """K×S×S×C tiles → K×N×(P·P·C) flattened patches, row-major over the grid."""
    tiles = _check_tiles(tiles, cfg)
    K, P, n = tiles.shape[0], cfg.patch_size, cfg.tile_size // cfg.patch_size
    x = tiles.reshape(K, n, P, n, P, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(K, n * n, P * P * cfg.channels))


def patchify_embed(tiles: np.ndarray, params: dict[str, Value], cfg: ViTConfig, graph: Graph) -> Value:
    """Token sequence K×(N+1)×D: CLS at index 0, then projected patches, plus positions."""
    dtype = params["patch_embed.weight"].dtype
    patches = ((patchify(tiles, cfg) - cfg.pixel_mean) / cfg.pixel_std).astype(dtype, copy=False)
    K = patches.shape[0]
    g = graph
    tok = g.add(g.matmul(patches, params["patch_embed.weight"]), params["patch_embed.bias"])
    cls = g.add(np.zeros((K, 1, cfg.embed_dim), dtype=dtype), params["cls_token"])
    seq = g.concat([cls, tok], axis=1)
    return g.add(seq, params["pos_embed"])


def _affine_norm(g: Graph, x: Value, weight: Value, bias: Value) -> Value:
    return g.add(g.mul(g.layer_norm(x), weight), bias)


def _block(g: Graph, x: Value, params: dict[str, Value], prefix: str, cfg: ViTConfig):
    K, T, D = x.shape
    H, dh = cfg.heads, cfg.head_dim
    p = lambda name: params[prefix + name]  # noqa: E731

    h = _affine_norm(g, x, p("norm1.weight"), p("norm1.bias"))
    qkv = g.add(g.matmul(h, p("attn.qkv.weight")), p("attn.qkv.bias"))
    qkv = g.transpose(g.reshape(qkv, (K, T, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = (g.getitem(qkv, i) for i in range(3))
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = g.softmax(scores, axis=-1)
    ctx = g.reshape(g.transpose(g.matmul(attn, v), (0, 2, 1, 3)), (K, T, D))
    x = g.add(x, g.add(g.matmul(ctx, p("attn.proj.weight")), p("attn.proj.bias")))

    h = _affine_norm(g, x, p("norm2.weight"), p("norm2.bias"))
    h = g.gelu(g.add(g.matmul(h, p("mlp.fc1.weight")), p("mlp.fc1.bias")))
    x = g.add(x, g.add(g.matmul(h, p("mlp.fc2.weight")), p("mlp.fc2.bias")))
    return x, attn


def forward_tiles(tiles: np.ndarray, params: dict[str, Value], cfg: ViTConfig, graph: Graph | None = None) -> BackboneOutput:
    """Run the backbone over a bag of tiles.

    Tiles are processed independently; row ``i`` of every output depends on
    tile ``i`` only.
    """
    g = graph if graph is not None else Graph()
    x = patchify_embed(tiles, params, cfg, g)
    attn = None
    for i in range(cfg.layers):
        x, attn = _block(g, x, params, f"blocks.{i}.", cfg)
    x = _affine_norm(g, x, params["norm.weight"], params["norm.bias"])
    features = g.getitem(x, (slice(None), 0, slice(None)))
    cls_row = g.getitem(attn, (slice(None), slice(None), 0, slice(1, None)))
    cls_self = attn.data[:, :, 0, 0].copy()
    return BackboneOutput(features=features, cls_attention=cls_row, cls_self=cls_self, graph=g)


def cls_attention_scores(out: BackboneOutput) -> Value:
    """Per-tile score: CLS→patch attention averaged over heads and patch tokens."""
    return out.graph.mean(out.cls_attention, axis=(1, 2))


def extract_features(tiles: np.ndarray, params: dict[str, Value], cfg: ViTConfig, chunk: int = 256):
    """Inference-only pass returning plain arrays (features K×D, scores K)."""
    feats, scores = [], []
    for start in range(0, len(tiles), chunk):
        g = Graph(enabled=False)
        out = forward_tiles(tiles[start:start + chunk], params, cfg, g)
        feats.append(out.features.data)
        scores.append(cls_attention_scores(out).data)
    return np.concatenate(feats), np.concatenate(scores)

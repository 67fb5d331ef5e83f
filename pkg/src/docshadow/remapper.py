"""Coarse stage: global shadow remapping.

The image is tokenized into non-overlapping patches, each token is labeled
shadow/free by its mask coverage, tokens plus learned domain indicators run
through a small pre-layernorm transformer, and the two groups are pooled
into region embeddings. A per-pixel MLP conditioned on both region
embeddings recolors shadow pixels; the result is soft-blended with the
input through the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ShapeError


@dataclass
class RemapperConfig:
    patch: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_hidden: tuple = (64, 64)
    max_grid: int = 64  # positional table covers up to max_grid*patch pixels

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeError("embedding dim must be divisible by heads")


@dataclass
class PatchTokens:
    raw: Tensor        # n × 3P², lossless row-major patches
    embeddings: Tensor  # n × D
    grid: tuple        # (rows, cols)
    positions: np.ndarray  # n × 2 (row, col) per token


@dataclass
class DomainLabels:
    shadow: np.ndarray    # boolean, per token
    coverage: np.ndarray  # mean mask value per patch


@dataclass
class RegionEmbeddings:
    shadow: Tensor
    free: Tensor
    shadow_empty: bool
    free_empty: bool


class RemapperWeights:
    """All trainable tensors of the coarse stage."""

    def __init__(self, cfg: RemapperConfig, rng: np.random.Generator, dtype=None):
        self.cfg = cfg
        d, p = cfg.dim, cfg.patch
        dt = dtype or nm.default_dtype()

        def param(arr):
            return Tensor(arr.astype(dt), requires_grad=True)

        self.patch_proj = param(nm.he_init(rng, (3 * p * p, d), 3 * p * p))
        self.patch_bias = param(np.zeros(d))
        self.pos_table = param(0.02 * rng.standard_normal((cfg.max_grid * cfg.max_grid, d)))
        self.domain_emb = param(0.02 * rng.standard_normal((2, d)))
        self.blocks = []
        for _ in range(cfg.layers):
            blk = {
                "ln1_g": param(np.ones(d)), "ln1_b": param(np.zeros(d)),
                "wq": param(nm.he_init(rng, (d, d), d)), "bq": param(np.zeros(d)),
                "wk": param(nm.he_init(rng, (d, d), d)), "bk": param(np.zeros(d)),
                "wv": param(nm.he_init(rng, (d, d), d)), "bv": param(np.zeros(d)),
                "wo": param(nm.he_init(rng, (d, d), d)), "bo": param(np.zeros(d)),
                "ln2_g": param(np.ones(d)), "ln2_b": param(np.zeros(d)),
                "w1": param(nm.he_init(rng, (d, 4 * d), d)), "b1": param(np.zeros(4 * d)),
                "w2": param(nm.he_init(rng, (4 * d, d), 4 * d)), "b2": param(np.zeros(d)),
            }
            self.blocks.append(blk)
        widths = [3 + 2 * d] + list(cfg.mlp_hidden) + [3]
        self.mlp = []
        for i in range(len(widths) - 1):
            self.mlp.append((param(nm.he_init(rng, (widths[i], widths[i + 1]), widths[i])),
                             param(np.zeros(widths[i + 1]))))

    def named_parameters(self) -> list:
        out = [("remapper.patch_proj", self.patch_proj),
               ("remapper.patch_bias", self.patch_bias),
               ("remapper.pos_table", self.pos_table),
               ("remapper.domain_emb", self.domain_emb)]
        for i, blk in enumerate(self.blocks):
            for k, t in blk.items():
                out.append((f"remapper.block{i}.{k}", t))
        for i, (w, b) in enumerate(self.mlp):
            out.append((f"remapper.mlp{i}.w", w))
            out.append((f"remapper.mlp{i}.b", b))
        return out


def tokenize(img: np.ndarray, weights: RemapperWeights) -> PatchTokens:
    """Split the image into P×P row-major patches and project to embeddings."""
    cfg = weights.cfg
    p = cfg.patch
    h, w = img.shape[:2]
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gr, gc = h // p, w // p
    if gr > cfg.max_grid or gc > cfg.max_grid:
        raise ShapeError(f"grid {gr}x{gc} exceeds positional table "
                         f"capacity {cfg.max_grid}")
    dt = weights.patch_proj.dtype
    raw_np = img.astype(dt).reshape(gr, p, gc, p, 3).transpose(0, 2, 1, 3, 4) \
        .reshape(gr * gc, 3 * p * p)
    raw = Tensor(raw_np)
    rows, cols = np.divmod(np.arange(gr * gc), gc)
    pos_idx = rows * cfg.max_grid + cols
    emb = nm.add(nm.add(nm.matmul(raw, weights.patch_proj), weights.patch_bias),
                 nm.gather_rows(weights.pos_table, pos_idx))
    return PatchTokens(raw=raw, embeddings=emb, grid=(gr, gc),
                       positions=np.stack([rows, cols], axis=1))


def fold(raw: np.ndarray, grid: tuple, patch: int) -> np.ndarray:
    """Inverse of tokenize's patch extraction; exact round trip."""
    gr, gc = grid
    p = patch
    return raw.reshape(gr, gc, p, p, 3).transpose(0, 2, 1, 3, 4) \
        .reshape(gr * p, gc * p, 3)


def partition(mask: np.ndarray, patch: int, tau: float = 0.5) -> DomainLabels:
    """Label each patch shadow iff its mean mask coverage >= tau."""
    h, w = mask.shape
    if h % patch or w % patch:
        raise ShapeError(f"mask {h}x{w} not divisible by patch size {patch}")
    gr, gc = h // patch, w // patch
    coverage = mask.reshape(gr, patch, gc, patch).mean(axis=(1, 3)).reshape(-1)
    return DomainLabels(shadow=coverage >= tau, coverage=coverage)


def _attention(x: Tensor, blk: dict, heads: int) -> Tensor:
    n, d = x.shape
    dh = d // heads
    q = nm.add(nm.matmul(x, blk["wq"]), blk["bq"])
    k = nm.add(nm.matmul(x, blk["wk"]), blk["bk"])
    v = nm.add(nm.matmul(x, blk["wv"]), blk["bv"])

    def split(t):  # n×D -> heads×n×dh
        return nm.transpose(nm.reshape(t, (n, heads, dh)), (1, 0, 2))

    q, k, v = split(q), split(k), split(v)
    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = nm.softmax(scores, axis=-1)
    ctx = nm.matmul(attn, v)
    merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (n, d))
    return nm.add(nm.matmul(merged, blk["wo"]), blk["bo"])


def attention_weights(x: Tensor, blk: dict, heads: int) -> np.ndarray:
    """Forward-only attention matrix (heads×n×n) for invariant checks."""
    n, d = x.shape
    dh = d // heads
    q = (x.data @ blk["wq"].data + blk["bq"].data).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (x.data @ blk["wk"].data + blk["bk"].data).reshape(n, heads, dh).transpose(1, 0, 2)
    s = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def encode(tokens: PatchTokens, labels: DomainLabels,
           weights: RemapperWeights) -> Tensor:
    """Domain-aware transformer encoding over all tokens jointly."""
    cfg = weights.cfg
    x = nm.add(tokens.embeddings,
               nm.gather_rows(weights.domain_emb, labels.shadow.astype(np.int64)))
    for blk in weights.blocks:
        h = nm.layernorm(x, blk["ln1_g"], blk["ln1_b"])
        x = nm.add(x, _attention(h, blk, cfg.heads))
        h = nm.layernorm(x, blk["ln2_g"], blk["ln2_b"])
        ff = nm.add(nm.matmul(nm.relu(nm.add(nm.matmul(h, blk["w1"]), blk["b1"])),
                              blk["w2"]), blk["b2"])
        x = nm.add(x, ff)
    return x


def region_embed(encoded: Tensor, labels: DomainLabels) -> RegionEmbeddings:
    """Mean-pool each domain group; an empty group yields the zero vector."""
    n, d = encoded.shape
    if len(labels.shadow) != n:
        raise ShapeError("labels/token count mismatch")
    idx_s = np.nonzero(labels.shadow)[0]
    idx_f = np.nonzero(~labels.shadow)[0]

    def pool(idx):
        if len(idx) == 0:
            return Tensor(np.zeros(d, dtype=encoded.dtype)), True
        return nm.tmean(nm.gather_rows(encoded, idx), axis=0), False

    e_s, s_empty = pool(idx_s)
    e_f, f_empty = pool(idx_f)
    return RegionEmbeddings(shadow=e_s, free=e_f,
                            shadow_empty=s_empty, free_empty=f_empty)


def remap(img: np.ndarray, mask: np.ndarray, regions: RegionEmbeddings,
          weights: RemapperWeights) -> Tensor:
    """Per-pixel MLP recoloring blended through the soft mask.

    Returns the coarse stage output I1 = M*f + (1-M)*img. With an empty
    shadow region there is nothing to remap and the input passes through.
    """
    dt = weights.patch_proj.dtype
    h, w = img.shape[:2]
    img_t = Tensor(img.astype(dt))
    if regions.shadow_empty:
        return img_t
    pix = nm.reshape(img_t, (h * w, 3))
    e_s = nm.broadcast_to(nm.reshape(regions.shadow, (1, -1)), (h * w, regions.shadow.shape[0]))
    e_f = nm.broadcast_to(nm.reshape(regions.free, (1, -1)), (h * w, regions.free.shape[0]))
    x = nm.concat([pix, e_s, e_f], axis=1)
    for i, (wm, bm) in enumerate(weights.mlp):
        x = nm.add(nm.matmul(x, wm), bm)
        if i < len(weights.mlp) - 1:
            x = nm.relu(x)
    f = nm.reshape(nm.sigmoid(x), (h, w, 3))
    m3 = Tensor(np.repeat(mask[:, :, None], 3, axis=2).astype(dt))
    return nm.add(nm.mul(m3, f), nm.mul(nm.add(nm.mul(m3, -1.0), 1.0), img_t))


def run(img: np.ndarray, mask: np.ndarray, weights: RemapperWeights,
        tau: float = 0.5) -> Tensor:
    """Full coarse stage: tokenize, partition, encode, pool, remap."""
    labels = partition(mask, weights.cfg.patch, tau)
    if not labels.shadow.any():
        return remap(img, mask, RegionEmbeddings(
            shadow=Tensor(np.zeros(weights.cfg.dim)),
            free=Tensor(np.zeros(weights.cfg.dim)),
            shadow_empty=True, free_empty=False), weights)
    tokens = tokenize(img, weights)
    encoded = encode(tokens, labels, weights)
    regions = region_embed(encoded, labels)
    return remap(img, mask, regions, weights)

"""Multi-head attention baselines and transformer layers.

These are the quadratic-cost counterparts to the selective-SSM blocks.
The (H, L_q, L_k) score tensor is materialized in float32 through the
allocation tracker: it IS the object whose growth the benchmarks measure,
so it is never fused away.  Unlike the float64-accumulating primitives in
`seqcore`, score and context matmuls run in float32 BLAS; at the sizes
where the quadratic term matters a float64 intermediate would double the
dominant allocation.

Score rows are produced in blocks: each block is computed, scaled,
masked (-inf above the diagonal) and softmax-normalized in RAM with
float64 row sums, then written to the score tensor once, so a
disk-backed tensor sees one sequential write pass and one read pass.

Incremental decoding keeps per-layer `KvCache` stores whose capacity
doubles on demand; each step appends one key/value row and attends over
the filled prefix, so step cost grows with the cache length (the contrast
with the O(1) SSM step is one of the measured effects).
"""

from __future__ import annotations

import math

import numpy as np

from . import alloc
from .layers import FeedForward, LayerNorm, Module
from .seqcore import DTYPE, Rng, ShapeError, as_features, linear, normal_weights

SOFTMAX_BLOCK_BYTES = 64 << 20
SCORE_BLOCK_BYTES = 4 << 20      # bounded scratch, small enough to skip tracking


def sinusoidal_positions(length: int, d_model: int, base: float = 10000.0) -> np.ndarray:
    """Fixed position encoding (length, d_model): sin on even channels,
    cos on odd, wavelengths geometric in the channel index."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(base, 2.0 * np.floor(idx / 2.0) / d_model)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(DTYPE)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    length, d = x.shape
    return np.ascontiguousarray(
        x.reshape(length, heads, d // heads).transpose(1, 0, 2)
    )


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, length, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(length, heads * dh)


def apply_causal_mask(scores: np.ndarray, row_offset: int = 0) -> None:
    """Set entries above the diagonal to -inf, in place, all heads.

    `row_offset` shifts the diagonal for score blocks whose first row is
    a later query position.
    """
    _, lq, lk = scores.shape
    neg = np.float32(-np.inf)
    for r in range(lq):
        col = r + row_offset + 1
        if col < lk:
            scores[:, r, col:] = neg


def softmax_rows_inplace(scores: np.ndarray) -> None:
    """Row softmax over the last axis, in place, blockwise.

    Row maxima are subtracted first; sums accumulate in float64.  Rows
    must contain at least one finite entry.
    """
    lk = scores.shape[-1]
    flat = scores.reshape(-1, lk)
    if flat.size == 0:
        return
    block = max(1, SOFTMAX_BLOCK_BYTES // max(1, lk * 4))
    for r0 in range(0, flat.shape[0], block):
        view = flat[r0:r0 + block]
        m = view.max(axis=1, keepdims=True)
        np.subtract(view, m, out=view)
        np.exp(view, out=view)
        s = view.sum(axis=1, keepdims=True, dtype=np.float64)
        np.divide(view, s, out=view, casting="unsafe")


class AttentionLayer(Module):
    """Scaled dot-product attention with materialized scores.

    `forward(x)` is self-attention; `forward(x, memory=m)` reads keys and
    values from `m`.  `causal=True` masks the future (self-attention
    only).
    """

    def __init__(self, d_model: int, rng: Rng, heads: int = 8, causal: bool = False):
        if d_model % heads:
            raise ShapeError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.causal = causal
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", normal_weights(rng.child(name), d_model, d_model))
            setattr(self, f"b_{name}", np.zeros(d_model, dtype=DTYPE))

    def forward(self, x: np.ndarray, memory: np.ndarray | None = None) -> np.ndarray:
        x = as_features(x, channels=self.d_model)
        source = x if memory is None else as_features(memory, channels=self.d_model,
                                                      name="memory")
        if self.causal and memory is not None:
            raise ShapeError("causal masking applies to self-attention only")
        if memory is not None and source.shape[0] == 0:
            raise ShapeError("cross-attention needs a non-empty memory")
        dh = self.d_model // self.heads
        q = alloc.tracker.track(_split_heads(linear(x, self.w_q, self.b_q), self.heads))
        k = alloc.tracker.track(_split_heads(linear(source, self.w_k, self.b_k), self.heads))
        v = alloc.tracker.track(_split_heads(linear(source, self.w_v, self.b_v), self.heads))

        # The full score tensor is materialized, but filled in query-row
        # blocks that are scaled, masked and normalized in RAM first, so a
        # disk-backed buffer sees each page written exactly once.
        lq, lk = x.shape[0], source.shape[0]
        scores = alloc.new_array((self.heads, lq, lk))
        scale = np.float32(1.0 / math.sqrt(dh))
        k_t = k.transpose(0, 2, 1)
        rows = max(1, SCORE_BLOCK_BYTES // max(1, self.heads * lk * 4))
        for r0 in range(0, lq, rows):
            block = np.matmul(q[:, r0:r0 + rows], k_t)
            block *= scale
            if self.causal:
                apply_causal_mask(block, row_offset=r0)
            softmax_rows_inplace(block)
            scores[:, r0:r0 + rows] = block
            del block

        ctx = alloc.new_array((self.heads, lq, dh))
        np.matmul(scores, v, out=ctx)
        del scores
        merged = alloc.tracker.track(_merge_heads(ctx))
        return alloc.tracker.track(linear(merged, self.w_o, self.b_o))

    __call__ = forward


class KvCache:
    """Growable per-layer key/value store for incremental decoding."""

    def __init__(self, heads: int, head_dim: int, capacity: int = 64):
        self.length = 0
        self._k = np.empty((heads, capacity, head_dim), dtype=DTYPE)
        self._v = np.empty((heads, capacity, head_dim), dtype=DTYPE)

    @property
    def capacity(self) -> int:
        return self._k.shape[1]

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        if self.length == self.capacity:
            grown_k = np.empty((self._k.shape[0], 2 * self.capacity, self._k.shape[2]), DTYPE)
            grown_v = np.empty_like(grown_k)
            grown_k[:, :self.length] = self._k[:, :self.length]
            grown_v[:, :self.length] = self._v[:, :self.length]
            self._k, self._v = grown_k, grown_v
        self._k[:, self.length] = k_row
        self._v[:, self.length] = v_row
        self.length += 1

    def keys(self) -> np.ndarray:
        return self._k[:, :self.length]

    def values(self) -> np.ndarray:
        return self._v[:, :self.length]


def attn_step(layer: AttentionLayer, cache: KvCache, x_t: np.ndarray) -> np.ndarray:
    """One causal self-attention step: append this token's key/value, then
    attend over the whole cached prefix.  Cost grows with cache length."""
    dh = layer.d_model // layer.heads
    row = x_t.reshape(1, -1)
    q = linear(row, layer.w_q, layer.b_q)[0].reshape(layer.heads, dh)
    k = linear(row, layer.w_k, layer.b_k)[0].reshape(layer.heads, dh)
    v = linear(row, layer.w_v, layer.b_v)[0].reshape(layer.heads, dh)
    cache.append(k, v)
    scores = np.einsum("hd,htd->ht", q, cache.keys()).astype(DTYPE)
    scores *= np.float32(1.0 / math.sqrt(dh))
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True, dtype=np.float64)
    ctx = np.einsum("ht,htd->hd", scores, cache.values()).astype(DTYPE)
    return linear(ctx.reshape(1, -1), layer.w_o, layer.b_o)[0]


class TransformerEncoderLayer(Module):
    """Pre-norm: self-attention residual, then feed-forward residual."""

    def __init__(self, d_model: int, rng: Rng, heads: int = 8):
        self.norm1 = LayerNorm(d_model)
        self.attn = AttentionLayer(d_model, rng.child("attn"), heads=heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, rng.child("ff"))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = alloc.tracker.track(x + self.attn(self.norm1(x)))
        return alloc.tracker.track(x + self.ff(self.norm2(x)))

    __call__ = forward


class TransformerDecoderLayer(Module):
    """Causal self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d_model: int, rng: Rng, heads: int = 8, cross: bool = False):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = AttentionLayer(d_model, rng.child("self"), heads=heads,
                                        causal=True)
        self.cross_attn = None
        if cross:
            self.norm_cross = LayerNorm(d_model)
            self.cross_attn = AttentionLayer(d_model, rng.child("cross"), heads=heads)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model, rng.child("ff"))

    def forward(self, x: np.ndarray, memory: np.ndarray | None = None) -> np.ndarray:
        x = alloc.tracker.track(x + self.self_attn(self.norm_self(x)))
        if self.cross_attn is not None:
            if memory is None:
                raise ShapeError("cross layer needs a memory sequence")
            x = alloc.tracker.track(
                x + self.cross_attn(self.norm_cross(x), memory=memory)
            )
        return alloc.tracker.track(x + self.ff(self.norm_ff(x)))

    __call__ = forward

    def initial_state(self, capacity: int = 64) -> KvCache:
        if self.cross_attn is not None:
            raise ShapeError("stepping is only supported without a cross block")
        return KvCache(self.self_attn.heads,
                       self.self_attn.d_model // self.self_attn.heads,
                       capacity=capacity)

    def step(self, cache: KvCache, x_t: np.ndarray):
        if self.cross_attn is not None:
            raise ShapeError("stepping is only supported without a cross block")
        normed = self.norm_self(x_t.reshape(1, -1))[0]
        y = x_t + attn_step(self.self_attn, cache, normed)
        z = y + self.ff(self.norm_ff(y.reshape(1, -1)))[0]
        return z, cache

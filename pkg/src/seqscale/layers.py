"""Mamba-style gated blocks built on the selective SSM, plus the residual
layers that stacks are assembled from.

Block dataflow (one direction):

    x -(in_proj)-> [main | gate]
    main -> causal depthwise conv -> silu -> selective SSM -> s
    y = out_proj( s * silu(gate) )

The bidirectional variant runs two (conv, SSM) branch pairs, the second on
the time-reversed main path, and averages the two SSM outputs before the
shared gate and output projection.  Input and output projections are
shared between directions.

Cross-attention counterpart: `cross_mamba` feeds the concatenation of a
memory sequence and a query sequence through a unidirectional block and
returns the last len(query) outputs, so queries read the memory through
the recurrent state while the memory positions attend only backward.

Residual wrappers are pre-norm: x + block(layer_norm(x)).  The
unidirectional pieces expose a `step` path carrying (conv window, SSM
state) so autoregressive decoding costs O(1) per step.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import alloc
from .seqcore import (
    DTYPE,
    Rng,
    ShapeError,
    as_features,
    causal_conv1d,
    gated_mult,
    layer_norm,
    linear,
    normal_weights,
    silu,
)
from .ssm import STATE_SIZE, SCAN_CHUNK, make_params, ssm_recurrence, ssm_scan, ssm_step

CONV_WIDTH = 4
EXPAND = 2


class Module:
    """Parameter container; `parameters()` walks arrays recursively."""

    def parameters(self):
        seen = set()
        stack = [self]
        while stack:
            obj = stack.pop()
            if id(obj) in seen:
                continue
            seen.add(id(obj))
            if isinstance(obj, np.ndarray):
                yield obj
            elif isinstance(obj, Module):
                stack.extend(vars(obj).values())
            elif dataclasses.is_dataclass(obj):
                stack.extend(getattr(obj, f.name) for f in dataclasses.fields(obj))
            elif isinstance(obj, (list, tuple)):
                stack.extend(obj)

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.parameters())


class LayerNorm(Module):
    def __init__(self, d_model: int):
        self.gain = np.ones(d_model, dtype=DTYPE)
        self.bias = np.zeros(d_model, dtype=DTYPE)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """linear -> silu -> linear with a 4x hidden width by default."""

    def __init__(self, d_model: int, rng: Rng, hidden: int | None = None):
        hidden = hidden or 4 * d_model
        self.w1 = normal_weights(rng.child("ff1"), d_model, hidden)
        self.b1 = np.zeros(hidden, dtype=DTYPE)
        self.w2 = normal_weights(rng.child("ff2"), hidden, d_model)
        self.b2 = np.zeros(d_model, dtype=DTYPE)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = alloc.tracker.track(linear(x, self.w1, self.b1))
        return alloc.tracker.track(linear(silu(h), self.w2, self.b2))


class _Branch(Module):
    """One (causal conv, selective SSM) pair over the expanded width."""

    def __init__(self, width: int, state_size: int, conv_width: int, rng: Rng):
        self.conv_kernel = normal_weights(rng.child("conv"), conv_width, width)
        self.conv_bias = np.zeros(width, dtype=DTYPE)
        self.ssm = make_params(rng.child("ssm"), width, state_size)

    def run(self, main: np.ndarray, path: str, chunk: int, workers: int) -> np.ndarray:
        act = silu(causal_conv1d(main, self.conv_kernel, self.conv_bias))
        alloc.tracker.track(act)
        if path == "scan":
            return ssm_scan(act, self.ssm, chunk=chunk, workers=workers)
        if path == "recurrence":
            return alloc.tracker.track(ssm_recurrence(act, self.ssm))
        raise ValueError(f"unknown ssm path {path!r}")


class UniMambaBlock(Module):
    """Causal gated block; output at t depends only on inputs up to t."""

    def __init__(self, d_model: int, rng: Rng, expand: int = EXPAND,
                 state_size: int = STATE_SIZE, conv_width: int = CONV_WIDTH):
        self.d_model = d_model
        self.width = expand * d_model
        self.w_in = normal_weights(rng.child("in"), d_model, 2 * self.width)
        self.b_in = np.zeros(2 * self.width, dtype=DTYPE)
        self.branch = _Branch(self.width, state_size, conv_width, rng.child("fwd"))
        self.w_out = normal_weights(rng.child("out"), self.width, d_model)
        self.b_out = np.zeros(d_model, dtype=DTYPE)

    def forward(self, x: np.ndarray, path: str = "scan",
                chunk: int = SCAN_CHUNK, workers: int = 1) -> np.ndarray:
        x = as_features(x, channels=self.d_model)
        u = alloc.tracker.track(linear(x, self.w_in, self.b_in))
        main, gate = u[:, :self.width], u[:, self.width:]
        s = self.branch.run(main, path, chunk, workers)
        g = alloc.tracker.track(gated_mult(s, gate))
        return alloc.tracker.track(linear(g, self.w_out, self.b_out))

    __call__ = forward

    def initial_state(self):
        k = self.branch.conv_kernel.shape[0]
        n = self.branch.ssm.state_size
        return (
            np.zeros((k - 1, self.width), dtype=DTYPE),
            np.zeros((self.width, n), dtype=np.float64),
        )

    def step(self, state, x_t: np.ndarray):
        """One token in O(1) memory; equivalent to forward on the suffix."""
        ring, h = state
        u = linear(x_t.reshape(1, -1), self.w_in, self.b_in)[0]
        main, gate = u[:self.width], u[self.width:]
        window = np.concatenate([ring, main[None]], axis=0)
        conv = np.einsum("ke,ke->e", window, self.branch.conv_kernel,
                         dtype=np.float64)
        conv = (conv + self.branch.conv_bias.astype(np.float64)).astype(DTYPE)
        act = silu(conv)
        y_s, h = ssm_step(self.branch.ssm, h, act)
        g = y_s * silu(gate)
        y = linear(g.reshape(1, -1), self.w_out, self.b_out)[0]
        return y, (window[1:].copy(), h)


class BiMambaBlock(Module):
    """Bidirectional block: forward and backward branches share the input
    and output projections; the two SSM outputs are averaged."""

    def __init__(self, d_model: int, rng: Rng, expand: int = EXPAND,
                 state_size: int = STATE_SIZE, conv_width: int = CONV_WIDTH):
        self.d_model = d_model
        self.width = expand * d_model
        self.w_in = normal_weights(rng.child("in"), d_model, 2 * self.width)
        self.b_in = np.zeros(2 * self.width, dtype=DTYPE)
        self.fwd = _Branch(self.width, state_size, conv_width, rng.child("fwd"))
        self.bwd = _Branch(self.width, state_size, conv_width, rng.child("bwd"))
        self.w_out = normal_weights(rng.child("out"), self.width, d_model)
        self.b_out = np.zeros(d_model, dtype=DTYPE)

    def forward(self, x: np.ndarray, path: str = "scan",
                chunk: int = SCAN_CHUNK, workers: int = 1) -> np.ndarray:
        x = as_features(x, channels=self.d_model)
        u = alloc.tracker.track(linear(x, self.w_in, self.b_in))
        main, gate = u[:, :self.width], u[:, self.width:]
        f = self.fwd.run(main, path, chunk, workers)
        rev = alloc.tracker.track(np.ascontiguousarray(main[::-1]))
        b_rev = self.bwd.run(rev, path, chunk, workers)
        s = alloc.tracker.track(((f + b_rev[::-1]) * np.float32(0.5)).astype(DTYPE))
        g = alloc.tracker.track(gated_mult(s, gate))
        return alloc.tracker.track(linear(g, self.w_out, self.b_out))

    __call__ = forward


def cross_mamba(block: UniMambaBlock, memory: np.ndarray, query: np.ndarray,
                path: str = "scan", chunk: int = SCAN_CHUNK,
                workers: int = 1) -> np.ndarray:
    """Join memory and query along time, run the causal block, and keep the
    outputs at the query positions.

    Output shape is (len(query), D) for any memory length, zero included.
    Every memory position can reach every query position through the
    state, while the memory segment never sees the query.
    """
    memory = as_features(memory, channels=block.d_model, name="memory")
    query = as_features(query, channels=block.d_model, name="query")
    joined = alloc.tracker.track(np.concatenate([memory, query], axis=0))
    out = block.forward(joined, path=path, chunk=chunk, workers=workers)
    return alloc.tracker.track(np.ascontiguousarray(out[len(memory):]))


def cross_mamba_multi(block: UniMambaBlock, xs, path: str = "scan",
                      chunk: int = SCAN_CHUNK, workers: int = 1) -> np.ndarray:
    """Generalized join: concatenate any number of sequences, run the
    causal block, keep the outputs for the last one.  A single-element
    list reduces to the plain block."""
    if not xs:
        raise ShapeError("cross_mamba_multi needs at least one sequence")
    parts = [as_features(x, channels=block.d_model, name=f"xs[{i}]")
             for i, x in enumerate(xs)]
    prefix = sum(p.shape[0] for p in parts[:-1])
    joined = alloc.tracker.track(np.concatenate(parts, axis=0))
    out = block.forward(joined, path=path, chunk=chunk, workers=workers)
    return alloc.tracker.track(np.ascontiguousarray(out[prefix:]))


class MambaEncoderLayer(Module):
    """Pre-norm residual wrapper, bidirectional by default; the
    feed-forward sub-block is off unless asked for."""

    def __init__(self, d_model: int, rng: Rng, bidirectional: bool = True,
                 ff: bool = False):
        self.norm = LayerNorm(d_model)
        if bidirectional:
            self.block = BiMambaBlock(d_model, rng.child("block"))
        else:
            self.block = UniMambaBlock(d_model, rng.child("block"))
        self.ff = FeedForward(d_model, rng.child("ff")) if ff else None
        self.norm_ff = LayerNorm(d_model) if ff else None

    def forward(self, x: np.ndarray, **kw) -> np.ndarray:
        x = alloc.tracker.track(x + self.block.forward(self.norm(x), **kw))
        if self.ff is not None:
            x = alloc.tracker.track(x + self.ff(self.norm_ff(x)))
        return x

    __call__ = forward


class MambaDecoderLayer(Module):
    """Causal layer: self block, then optionally a cross block reading an
    encoder memory.  No feed-forward; the gated block plays that role."""

    def __init__(self, d_model: int, rng: Rng, cross: bool = False,
                 ff: bool = False):
        self.norm_self = LayerNorm(d_model)
        self.self_block = UniMambaBlock(d_model, rng.child("self"))
        self.cross_block = None
        if cross:
            self.norm_cross = LayerNorm(d_model)
            self.cross_block = UniMambaBlock(d_model, rng.child("cross"))
        self.ff = FeedForward(d_model, rng.child("ff")) if ff else None
        self.norm_ff = LayerNorm(d_model) if ff else None

    def forward(self, x: np.ndarray, memory: np.ndarray | None = None,
                **kw) -> np.ndarray:
        y = alloc.tracker.track(x + self.self_block.forward(self.norm_self(x), **kw))
        if self.cross_block is not None:
            if memory is None:
                raise ShapeError("cross layer needs a memory sequence")
            y = alloc.tracker.track(
                y + cross_mamba(self.cross_block, memory, self.norm_cross(y), **kw)
            )
        if self.ff is not None:
            y = alloc.tracker.track(y + self.ff(self.norm_ff(y)))
        return y

    __call__ = forward

    def initial_state(self):
        if self.cross_block is not None:
            raise ShapeError("stepping is only supported without a cross block")
        return self.self_block.initial_state()

    def step(self, state, x_t: np.ndarray):
        if self.cross_block is not None:
            raise ShapeError("stepping is only supported without a cross block")
        normed = layer_norm(x_t.reshape(1, -1), self.norm_self.gain,
                            self.norm_self.bias)[0]
        y, state = self.self_block.step(state, normed)
        y = x_t + y
        if self.ff is not None:
            y = y + self.ff(self.norm_ff(y.reshape(1, -1)))[0]
        return y, state

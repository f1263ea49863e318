"""Selective state-space recurrence with three equivalent evaluation paths.

The model per channel c with state size N is

    h_t = a_bar_t * h_{t-1} + b_bar_t * x_t        (diagonal transition)
    y_t = <c_t, h_t> + d_skip * x_t

where the discrete parameters depend on the input at each step:

    delta_t = softplus(W_delta x_t + b_delta)       > 0, shape (C,)
    a_bar_t = exp(delta_t * A)                      zero-order hold, A < 0
    b_bar_t = delta_t * B_t                         Euler rule
    B_t, C_t = linear projections of x_t, shape (N,), shared across channels

Three routes compute y from x:

* `ssm_step` / `ssm_recurrence`: literal left-to-right fold.  The
  recurrence is defined as the fold of the step function, so a sequence of
  steps and one recurrence call agree bit for bit.
* `ssm_scan`: the same recurrence through an associative prefix scan over
  (a, b) pairs with composition (a2, b2) . (a1, b1) = (a2*a1, a2*b1 + b2),
  evaluated in fixed-size chunks so live memory stays linear in L with a
  small constant.  Agrees with the fold to float32 rounding.
* `ssm_kernel_conv`: valid only when the parameters are input-independent;
  then the map is LTI with impulse response K = (C B, C A B, C A^2 B, ...)
  and y = x * K (causal convolution) plus the skip term.

Inputs, parameters, and outputs are float32.  The discrete coefficients
(a_bar, b_bar * x) are computed in float32 with the same expression on
every path, then the state they drive is accumulated in float64, so the
step fold and the scan differ only by float64 reassociation and agree far
inside float32 rounding even on long sequences.

Chunk buffers are allocated through `alloc` so benchmark accounting sees
them; their size is set by `chunk` and does not grow with L.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import alloc
from .seqcore import (
    DTYPE,
    Rng,
    ShapeError,
    as_features,
    causal_conv1d,
    linear,
    normal_weights,
    softplus,
)

STATE_SIZE = 16
SCAN_CHUNK = 128
SCAN_FAULT_ENV = "SEQSCALE_SCAN_FAULT"


@dataclass
class SelectiveSsmParams:
    """Parameters of one selective SSM over C channels, state size N."""

    a_log: np.ndarray        # (C, N); transition is A = -exp(a_log)
    w_delta_in: np.ndarray   # (C, R) low-rank step-size projection
    w_delta_out: np.ndarray  # (R, C)
    b_delta: np.ndarray      # (C,)
    w_b: np.ndarray          # (C, N)
    b_b: np.ndarray          # (N,)
    w_c: np.ndarray          # (C, N)
    b_c: np.ndarray          # (N,)
    d_skip: np.ndarray       # (C,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def transition(self) -> np.ndarray:
        """A = -exp(a_log), elementwise negative, shape (C, N)."""
        return (-np.exp(self.a_log.astype(np.float64))).astype(DTYPE)

    def is_input_independent(self) -> bool:
        return (
            not self.w_delta_in.any()
            and not self.w_delta_out.any()
            and not self.w_b.any()
            and not self.w_c.any()
        )


def make_params(rng: Rng, channels: int, state_size: int = STATE_SIZE,
                skip: bool = True, delta_rank: int | None = None) -> SelectiveSsmParams:
    """Initialize selective parameters.

    a_log rows are log(1..N) so the decay spectrum spans slow to fast
    modes; projection weights are normal(0, 1/sqrt(fan_in)); biases zero;
    d_skip ones (or zeros when skip=False, recovering the bare recurrence).
    """
    if delta_rank is None:
        delta_rank = max(1, math.ceil(channels / 16))
    a_log = np.tile(
        np.log(np.arange(1, state_size + 1, dtype=np.float64)).astype(DTYPE),
        (channels, 1),
    )
    return SelectiveSsmParams(
        a_log=a_log,
        w_delta_in=normal_weights(rng.child("delta_in"), channels, delta_rank),
        w_delta_out=normal_weights(rng.child("delta_out"), delta_rank, channels),
        b_delta=np.zeros(channels, dtype=DTYPE),
        w_b=normal_weights(rng.child("b"), channels, state_size),
        b_b=np.zeros(state_size, dtype=DTYPE),
        w_c=normal_weights(rng.child("c"), channels, state_size),
        b_c=np.zeros(state_size, dtype=DTYPE),
        d_skip=np.ones(channels, dtype=DTYPE) if skip else np.zeros(channels, dtype=DTYPE),
    )


def make_lti_params(rng: Rng, channels: int, state_size: int = STATE_SIZE,
                    skip: bool = True) -> SelectiveSsmParams:
    """Input-independent variant: projection weights zero, biases random.

    delta_t, B_t, C_t then reduce to constants, which is the regime where
    `ssm_kernel_conv` applies.
    """
    p = make_params(rng, channels, state_size, skip=skip)
    p.w_delta_in = np.zeros_like(p.w_delta_in)
    p.w_delta_out = np.zeros_like(p.w_delta_out)
    p.w_b = np.zeros_like(p.w_b)
    p.w_c = np.zeros_like(p.w_c)
    p.b_delta = rng.child("bias_delta").normal(channels, std=0.5).astype(DTYPE)
    p.b_b = rng.child("bias_b").normal(state_size).astype(DTYPE)
    p.b_c = rng.child("bias_c").normal(state_size).astype(DTYPE)
    return p


def selectivize(x: np.ndarray, p: SelectiveSsmParams):
    """Input-dependent coefficient sequences for a whole sequence.

    Returns (delta, b_seq, c_seq) with shapes (L, C), (L, N), (L, N).
    """
    x = as_features(x, channels=p.channels)
    delta = softplus(linear(linear(x, p.w_delta_in), p.w_delta_out, p.b_delta))
    b_seq = linear(x, p.w_b, p.b_b)
    c_seq = linear(x, p.w_c, p.b_c)
    return delta, b_seq, c_seq


def ssm_step(p: SelectiveSsmParams, state: np.ndarray, x_t: np.ndarray):
    """One recurrence update.  state is (C, N) float64; x_t is (C,).

    Returns (y_t, new_state); constant time and memory in sequence length.
    Coefficients are float32, the state update runs in float64.
    """
    x_row = x_t.reshape(1, -1)
    delta, b_t, c_t = selectivize(x_row, p)
    a = p.transition()
    a_bar = np.exp(delta[0][:, None] * a)
    b_term = (delta[0][:, None] * b_t[0][None, :]) * x_t[:, None]
    new_state = a_bar.astype(np.float64) * state + b_term.astype(np.float64)
    y = np.einsum("cn,n->c", new_state, c_t[0], dtype=np.float64)
    y += p.d_skip.astype(np.float64) * x_t
    return y.astype(DTYPE), new_state


def ssm_recurrence(x: np.ndarray, p: SelectiveSsmParams, state=None) -> np.ndarray:
    """Sequential reference path: a literal fold of `ssm_step` over time."""
    x = as_features(x, channels=p.channels)
    h = np.zeros((p.channels, p.state_size), dtype=np.float64) if state is None else state
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        y[t], h = ssm_step(p, h, x[t])
    return y


def scan_compose(a2, b2, a1, b1):
    """Compose scan elements: apply (a1, b1) first, then (a2, b2)."""
    return a2 * a1, a2 * b1 + b2


def _scan_pairs(a: np.ndarray, b: np.ndarray, faulty: bool = False) -> None:
    """In-place inclusive prefix scan along axis 0 under `scan_compose`.

    Work-efficient pairwise tree: combine adjacent pairs, scan the half-
    length sequence of pair products, then fill even slots from their left
    neighbor.  Length must be a power of two.  O(n) work, O(log n) depth.
    """
    n = a.shape[0]
    if n <= 1:
        return
    a_even, a_odd = a[0::2], a[1::2]
    b_even, b_odd = b[0::2], b[1::2]
    if faulty:
        b_odd += b_even
    else:
        b_odd += a_odd * b_even
    a_odd *= a_even
    _scan_pairs(a_odd, b_odd)
    b_even[1:] += a_even[1:] * b_odd[:-1]
    a_even[1:] *= a_odd[:-1]


def ssm_scan(x: np.ndarray, p: SelectiveSsmParams, state=None,
             chunk: int = SCAN_CHUNK, workers: int = 1) -> np.ndarray:
    """Prefix-scan evaluation of the selective recurrence.

    Processes the sequence in chunks of `chunk` steps (a power of two),
    carrying the state between chunks, so live memory is the (L, C) input
    and output, the (L,) coefficient sequences, and two chunk-sized
    float64 accumulator buffers.  `workers` splits the channel axis across
    threads; results and allocations are identical for any worker count.
    A length-1 sequence is evaluated as a single recurrence step.
    """
    x = as_features(x, channels=p.channels)
    length, channels = x.shape
    if chunk < 1 or chunk & (chunk - 1):
        raise ValueError("chunk must be a power of two")
    if length == 0:
        return np.empty_like(x)
    if state is None:
        h0 = np.zeros((channels, p.state_size), dtype=np.float64)
    else:
        h0 = state.astype(np.float64)
    if length == 1:
        y0, _ = ssm_step(p, h0, x[0])
        return y0.reshape(1, channels)

    delta, b_seq, c_seq = selectivize(x, p)
    for arr in (delta, b_seq, c_seq):
        alloc.tracker.track(arr)
    a = p.transition()
    y = alloc.new_array((length, channels))

    q = min(chunk, 1 << (length - 1).bit_length())
    a_buf = alloc.new_array((q, channels, p.state_size), dtype=np.float64)
    b_buf = alloc.new_array((q, channels, p.state_size), dtype=np.float64)
    faulty = bool(os.environ.get(SCAN_FAULT_ENV))

    def run_channels(c0: int, c1: int) -> None:
        av = a_buf[:, c0:c1]
        bv = b_buf[:, c0:c1]
        h = h0[c0:c1]
        for t0 in range(0, length, q):
            t1 = min(t0 + q, length)
            r = t1 - t0
            # next power of two >= r fits in the buffer
            r2 = 1 << (r - 1).bit_length()
            # coefficients in float32, matching ssm_step bit for bit; the
            # assignment widens them into the float64 accumulators
            av[:r] = np.exp(delta[t0:t1, c0:c1, None] * a[None, c0:c1])
            bv[:r] = (delta[t0:t1, c0:c1, None] * b_seq[t0:t1, None, :]) \
                * x[t0:t1, c0:c1, None]
            if r2 > r:
                av[r:r2] = 1.0
                bv[r:r2] = 0.0
            _scan_pairs(av[:r2], bv[:r2], faulty=faulty)
            # prefix applied to the carried state gives the states themselves
            np.multiply(av[:r], h[None], out=av[:r])
            av[:r] += bv[:r]
            h = av[r - 1].copy()
            out = np.einsum("qcn,qn->qc", av[:r], c_seq[t0:t1], dtype=np.float64)
            out += p.d_skip[None, c0:c1].astype(np.float64) * x[t0:t1, c0:c1]
            y[t0:t1, c0:c1] = out

    if workers <= 1 or channels == 1:
        run_channels(0, channels)
    else:
        workers = min(workers, channels)
        bounds = [round(i * channels / workers) for i in range(workers + 1)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_channels, bounds[i], bounds[i + 1])
                for i in range(workers)
                if bounds[i] < bounds[i + 1]
            ]
            for fut in futures:
                fut.result()
    return y


def ssm_kernel_conv(x: np.ndarray, p: SelectiveSsmParams) -> np.ndarray:
    """LTI evaluation through the materialized impulse response.

    Requires input-independent parameters (see `make_lti_params`); raises
    ShapeError otherwise, because with selectivity the map has no single
    impulse response.  Cost is O(L^2 C) so intended for short sequences.
    """
    x = as_features(x, channels=p.channels)
    if not p.is_input_independent():
        raise ShapeError("kernel form needs constant parameters; this model is selective")
    length, channels = x.shape
    if length == 0:
        return np.empty_like(x)
    delta = softplus(p.b_delta)
    a_bar = np.exp(delta[:, None].astype(np.float64) * p.transition().astype(np.float64))
    b_bar = delta[:, None].astype(np.float64) * p.b_b[None, :].astype(np.float64)
    c_vec = p.b_c.astype(np.float64)

    kern = np.empty((length, channels), dtype=np.float64)
    power = b_bar.copy()
    for lag in range(length):
        kern[lag] = power @ c_vec
        power *= a_bar
    # kernel row 0 is lag 0; causal_conv1d puts the current step last
    y = causal_conv1d(x, np.ascontiguousarray(kern[::-1]).astype(DTYPE))
    y += p.d_skip[None, :] * x
    return y.astype(DTYPE)

"""Shared numeric primitives for the sequence blocks in this package.

Conventions used throughout:

* A feature sequence is a C-contiguous float32 array of shape (L, D):
  L timesteps by D channels.  Batch handling is out of scope; callers loop.
* Arrays are stored in float32.  Reductions (matmul, norms, convolution
  taps) accumulate in float64 and round once at the end, so results do not
  depend on BLAS blocking.
* Every function here is pure: same inputs give bit-identical outputs.

Randomness comes from the counter-mode generator `Rng` below rather than
`numpy.random`, so that streams can be split by name and reproduced across
numpy versions.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """An operation received arrays whose shapes cannot be combined."""


def as_features(x, channels: int | None = None, name: str = "x") -> np.ndarray:
    """Validate and return `x` as a float32 (L, D) feature sequence.

    Accepts anything array-like; rejects wrong rank or, when `channels`
    is given, a mismatched channel count.  L may be zero.
    """
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (L, D), got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(
            f"{name} must have {channels} channels, got {arr.shape[1]}"
        )
    return arr


def linear(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Affine map along the channel axis: x @ weight + bias.

    weight has shape (D_in, D_out); bias, if given, (D_out,).
    Accumulates in float64, returns float32.
    """
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input has {x.shape[-1]} channels, weight expects {weight.shape[0]}"
        )
    out = x.astype(np.float64) @ weight.astype(np.float64)
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(DTYPE)


def layer_norm(x: np.ndarray, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each timestep over its channels to zero mean, unit variance.

    Statistics are computed in float64.  gain/bias of shape (D,) are applied
    after normalization when given.
    """
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    out = (x64 - mean) / np.sqrt(var + eps)
    if gain is not None:
        out = out * gain.astype(np.float64)
    if bias is not None:
        out = out + bias.astype(np.float64)
    return out.astype(DTYPE)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), computed without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    t = np.exp(-np.abs(x), dtype=DTYPE)
    sig = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return (x * sig).astype(DTYPE)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), stable for large |x|; always strictly positive."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64)).astype(DTYPE)


def gated_mult(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise gate a * silu(b); shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"gated_mult: shapes {a.shape} and {b.shape} differ")
    return (a * silu(b)).astype(DTYPE)


def causal_conv1d(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """Depthwise causal convolution along time.

    kernel has shape (K, D): one width-K tap filter per channel, with
    kernel[K-1] multiplying the current step and earlier rows reaching back
    in time.  The sequence is left-padded with K-1 zeros, so output length
    equals input length and no output depends on a later input.
    """
    x = as_features(x)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"causal_conv1d: kernel shape {kernel.shape} does not match {x.shape[1]} channels"
        )
    k = kernel.shape[0]
    length = x.shape[0]
    if length == 0:
        return x.astype(DTYPE)
    padded = np.zeros((length + k - 1, x.shape[1]), dtype=DTYPE)
    padded[k - 1:] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)
    # windows: (L, D, K); tap j of the window is timestep t-(K-1)+j
    out = np.einsum("ldk,kd->ld", windows, kernel, dtype=np.float64)
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# Deterministic randomness


_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; wrapping multiplies are intended
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Counter-mode SplitMix64 stream with named child streams.

    The stream is a pure function of (seed, draw index), so any prefix of
    draws is reproducible regardless of how calls were batched.  `child`
    derives an independent stream from a string tag; deriving the same tag
    twice gives the same stream.
    """

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            keyed = np.uint64(self._seed) + idx * np.uint64(_GOLDEN)
        return _mix64(keyed)

    @staticmethod
    def _shape_of(size) -> tuple:
        if size is None:
            return ()
        if isinstance(size, (int, np.integer)):
            return (int(size),)
        return tuple(size)

    def uniform(self, size=None) -> np.ndarray:
        """float64 samples in [0, 1)."""
        shape = self._shape_of(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n == 0:
            return np.empty(shape, dtype=np.float64)
        vals = (self._raw(n) >> np.uint64(11)) * (2.0 ** -53)
        return vals.reshape(shape) if shape else vals[0]

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        """float64 normal(0, std) samples via Box-Muller."""
        shape = self._shape_of(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n == 0:
            return np.empty(shape, dtype=np.float64)
        half = (n + 1) // 2
        raw = self._raw(2 * half)
        # u1 in (0, 1] keeps the log finite
        u1 = ((raw[:half] >> np.uint64(11)) + np.uint64(1)) * (2.0 ** -53)
        u2 = (raw[half:] >> np.uint64(11)) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        pairs = np.empty(2 * half, dtype=np.float64)
        pairs[0::2] = r * np.cos(theta)
        pairs[1::2] = r * np.sin(theta)
        out = std * pairs[:n]
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """int64 samples in [low, high); uses the uniform stream."""
        if high <= low:
            raise ValueError("integers: need high > low")
        u = np.asarray(self.uniform(size))
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        return np.minimum(vals, high - 1)

    def child(self, tag: str) -> "Rng":
        mixed = _mix64(np.uint64(self._seed ^ _fnv1a(tag)))
        return Rng(int(mixed))


def normal_weights(rng: Rng, d_in: int, d_out: int) -> np.ndarray:
    """float32 weight matrix (d_in, d_out) ~ normal(0, 1/sqrt(d_in))."""
    return rng.normal((d_in, d_out), std=1.0 / math.sqrt(d_in)).astype(DTYPE)


# ---------------------------------------------------------------------------
# Golden-vector files

_DTYPE_TAGS = {"f32": np.float32, "f64": np.float64, "i64": np.int64}


def save_vectors(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays as <path>.json (manifest) plus <path>.bin (payload).

    The manifest records shapes, dtype tags, byte offsets, and any metadata;
    the payload is the raw little-endian bytes of each array concatenated in
    manifest order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = next(t for t, d in _DTYPE_TAGS.items() if arr.dtype == d)
        data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": tag,
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)
    manifest = {"byte_order": "little", "arrays": entries}
    if meta:
        manifest["meta"] = meta
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_vectors(path) -> tuple[dict, dict]:
    """Read arrays written by `save_vectors`; returns (arrays, meta)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    payload = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(_DTYPE_TAGS[entry["dtype"]]).newbyteorder("<")
        start = entry["offset"]
        stop = start + entry["nbytes"]
        arr = np.frombuffer(payload[start:stop], dtype=dtype)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return arrays, manifest.get("meta", {})

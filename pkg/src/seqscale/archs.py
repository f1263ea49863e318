"""Skeletal speech architectures assembled from the sequence blocks.

Three task families, each buildable with either selective-SSM or
attention internals so their scaling can be compared like for like:

* separation: waveform in and out through a strided linear basis (8 kHz,
  stride 8 samples, window 16, so one token per millisecond), a stack of
  bidirectional layers estimating S multiplicative masks, overlap-add
  decode.
* recognition: spectrogram-like frames through a two-fold stride-2
  convolutional frontend (one token per 4 frames), then macaron encoder
  blocks; an optional token decoder reads the encoder memory.
* synthesis: a codec language model over 8 hierarchical codebooks of
  1024 codes; an autoregressive stack handles codebook 1 next-token
  prediction conditioned on (phonemes, enrollment, generated so far), and
  a non-autoregressive stack fills codebooks 2..8 one stage at a time
  from summed embeddings of everything below the stage.

Weights are random but seeded; nothing here is trained.  The point is
shape contracts, causality structure, and cost scaling.
"""

from __future__ import annotations

import math
import time
from fractions import Fraction

import numpy as np

from . import alloc
from .attention import (
    AttentionLayer,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    sinusoidal_positions,
)
from .layers import (
    BiMambaBlock,
    FeedForward,
    LayerNorm,
    MambaDecoderLayer,
    MambaEncoderLayer,
    Module,
    UniMambaBlock,
)
from .seqcore import DTYPE, Rng, ShapeError, as_features, linear, normal_weights, silu

SAMPLE_RATE = 8000
BASIS_STRIDE = 8
BASIS_WINDOW = 16
FRAME_MS = 10          # spectrogram hop for the recognizer frontend
N_MELS = 80
TEXT_VOCAB = 64
CODEBOOKS = 8
CODES = 1024
EOS = CODES            # id 1024; code embedding tables hold 1025 rows
PHONEME_VOCAB = 64


def tokens_for_duration(duration_ms, resolution_ms) -> int:
    """floor(duration / resolution), treating both values as exact rationals.

    Resolutions like 40/3 ms arrive as floats; interpreting them through
    the nearest small fraction keeps boundary counts exact (10 000 ms at
    40/3 ms is exactly 750 tokens, not 749.999...).
    """
    duration = Fraction(duration_ms).limit_denominator(1_000_000)
    resolution = Fraction(resolution_ms).limit_denominator(1_000_000)
    if duration <= 0 or resolution <= 0:
        raise ValueError("duration and resolution must be positive")
    return int(duration / resolution)


# ---------------------------------------------------------------------------
# Separation


class TasNetModel(Module):
    """Mask-based time-domain separator, single path end to end.

    kind selects the mask stack internals: "mamba" (bidirectional blocks,
    no feed-forward) or "attention" (transformer encoder layers).
    """

    def __init__(self, d_model: int, depth: int, rng: Rng, kind: str = "mamba",
                 n_sources: int = 2, heads: int = 8, ff: bool = False):
        if n_sources < 1:
            raise ValueError("need at least one source")
        self.d_model = d_model
        self.n_sources = n_sources
        self.kind = kind
        self.basis = normal_weights(rng.child("basis"), BASIS_WINDOW, d_model)
        self.inv_basis = normal_weights(rng.child("inv_basis"), d_model, BASIS_WINDOW)
        if kind == "mamba":
            self.stack = [
                MambaEncoderLayer(d_model, rng.child(f"layer{i}"), ff=ff)
                for i in range(depth)
            ]
        elif kind == "attention":
            self.stack = [
                TransformerEncoderLayer(d_model, rng.child(f"layer{i}"), heads=heads)
                for i in range(depth)
            ]
        else:
            raise ValueError(f"unknown kind {kind!r}")
        self.mask_norm = LayerNorm(d_model)
        self.w_mask = normal_weights(rng.child("mask"), d_model, n_sources * d_model)
        self.b_mask = np.zeros(n_sources * d_model, dtype=DTYPE)

    def encode(self, audio: np.ndarray) -> np.ndarray:
        """Strided windowed projection: (T,) samples -> (frames, D)."""
        audio = np.asarray(audio, dtype=DTYPE)
        if audio.ndim != 1 or audio.shape[0] < BASIS_STRIDE:
            raise ShapeError("mono waveform of at least one stride required")
        frames = -(-audio.shape[0] // BASIS_STRIDE)
        padded = np.zeros((frames - 1) * BASIS_STRIDE + BASIS_WINDOW, dtype=DTYPE)
        padded[:audio.shape[0]] = audio
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, BASIS_WINDOW)[::BASIS_STRIDE]
        return alloc.tracker.track(linear(np.ascontiguousarray(windows), self.basis))

    def decode(self, features: np.ndarray, length: int) -> np.ndarray:
        """(frames, D) -> (length,) samples by overlap-add of basis windows."""
        frames = linear(features, self.inv_basis)
        out = np.zeros((features.shape[0] - 1) * BASIS_STRIDE + BASIS_WINDOW,
                       dtype=DTYPE)
        for k in range(BASIS_WINDOW // BASIS_STRIDE):
            lo = k * BASIS_STRIDE
            seg = out[lo:lo + features.shape[0] * BASIS_STRIDE]
            seg.reshape(-1, BASIS_STRIDE)[...] += frames[:, lo:lo + BASIS_STRIDE]
        return out[:length]

    def masks(self, mixture_features: np.ndarray, **kw) -> np.ndarray:
        """(frames, D) -> non-negative (S, frames, D) multiplicative masks."""
        h = mixture_features
        for layer in self.stack:
            h = layer(h, **kw) if self.kind == "mamba" else layer(h)
        raw = alloc.tracker.track(
            linear(self.mask_norm(h), self.w_mask, self.b_mask))
        stacked = raw.reshape(-1, self.n_sources, self.d_model).transpose(1, 0, 2)
        return alloc.tracker.track(np.maximum(stacked, 0.0).astype(DTYPE))

    def separate(self, audio: np.ndarray, **kw) -> np.ndarray:
        """Mono mixture (T,) -> (S, T) estimated sources."""
        enc = self.encode(audio)
        masks = self.masks(enc, **kw)
        out = np.empty((self.n_sources, np.asarray(audio).shape[0]), dtype=DTYPE)
        for s in range(self.n_sources):
            masked = alloc.tracker.track((masks[s] * enc).astype(DTYPE))
            out[s] = self.decode(masked, out.shape[1])
        return alloc.tracker.track(out)

    forward = separate


# ---------------------------------------------------------------------------
# Recognition


class ConvFrontend(Module):
    """Two stride-2 width-3 convolutions over frames: (T, n_in) ->
    (ceil(T/4), d_model), silu after each."""

    def __init__(self, d_model: int, rng: Rng, n_in: int = N_MELS):
        self.k1 = rng.child("k1").normal((3, n_in, d_model),
                                         std=1.0 / math.sqrt(3 * n_in)).astype(DTYPE)
        self.b1 = np.zeros(d_model, dtype=DTYPE)
        self.k2 = rng.child("k2").normal((3, d_model, d_model),
                                         std=1.0 / math.sqrt(3 * d_model)).astype(DTYPE)
        self.b2 = np.zeros(d_model, dtype=DTYPE)

    @staticmethod
    def _conv_stride2(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
        length = x.shape[0]
        out_len = -(-length // 2)
        padded = np.zeros((2 * out_len + 1, x.shape[1]), dtype=DTYPE)
        padded[:length] = x
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, 3, axis=0)[::2]           # (out_len, C, 3)
        out = np.einsum("tcw,wcd->td", windows, kernel, dtype=np.float64)
        return (out + bias).astype(DTYPE)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        if frames.ndim != 2:
            raise ShapeError("frontend expects (frames, bins)")
        h = silu(self._conv_stride2(frames, self.k1, self.b1))
        h = silu(self._conv_stride2(h, self.k2, self.b2))
        return alloc.tracker.track(h)


class ConvModule(Module):
    """Pointwise-expand, gate, depthwise (centered), silu, pointwise."""

    def __init__(self, d_model: int, rng: Rng, depthwise_width: int = 9):
        self.norm = LayerNorm(d_model)
        self.w_expand = normal_weights(rng.child("expand"), d_model, 2 * d_model)
        self.b_expand = np.zeros(2 * d_model, dtype=DTYPE)
        self.depthwise = rng.child("depthwise").normal(
            (depthwise_width, d_model),
            std=1.0 / math.sqrt(depthwise_width)).astype(DTYPE)
        self.b_depthwise = np.zeros(d_model, dtype=DTYPE)
        self.w_out = normal_weights(rng.child("out"), d_model, d_model)
        self.b_out = np.zeros(d_model, dtype=DTYPE)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = alloc.tracker.track(linear(self.norm(x), self.w_expand, self.b_expand))
        d = h.shape[1] // 2
        gated = alloc.tracker.track(
            (h[:, :d] * 1.0 / (1.0 + np.exp(-h[:, d:], dtype=np.float64)))
            .astype(DTYPE))
        width = self.depthwise.shape[0]
        half = width // 2
        padded = np.zeros((gated.shape[0] + width - 1, d), dtype=DTYPE)
        padded[half:half + gated.shape[0]] = gated
        windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)
        conv = np.einsum("tcw,wc->tc", windows, self.depthwise, dtype=np.float64)
        conv = silu((conv + self.b_depthwise).astype(DTYPE))
        return alloc.tracker.track(linear(conv, self.w_out, self.b_out))


class _MacaronBlock(Module):
    """Shared shape of the recognizer blocks:

        x1 = x + ff_scale * FF(x)
        x2 = x1 + Mix(x1)          (bidirectional Mamba or self-attention)
        x3 = x2 + Conv(x2)
        y  = LayerNorm(x3 + ff_scale * FF(x3))

    ff_scale is 1/2; the sub-blocks carry their own pre-norms.
    """

    def __init__(self, d_model: int, rng: Rng):
        self.ff_scale = np.float32(0.5)
        self.norm_ff1 = LayerNorm(d_model)
        self.ff1 = FeedForward(d_model, rng.child("ff1"))
        self.norm_mix = LayerNorm(d_model)
        self.conv = ConvModule(d_model, rng.child("conv"))
        self.norm_ff2 = LayerNorm(d_model)
        self.ff2 = FeedForward(d_model, rng.child("ff2"))
        self.norm_out = LayerNorm(d_model)

    def _mix(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, **kw) -> np.ndarray:
        x1 = alloc.tracker.track(x + self.ff_scale * self.ff1(self.norm_ff1(x)))
        x2 = alloc.tracker.track(x1 + self._mix(self.norm_mix(x1), **kw))
        x3 = alloc.tracker.track(x2 + self.conv(x2))
        return self.norm_out(
            alloc.tracker.track(x3 + self.ff_scale * self.ff2(self.norm_ff2(x3))))


class ConMambaBlock(_MacaronBlock):
    def __init__(self, d_model: int, rng: Rng):
        super().__init__(d_model, rng)
        self.mixer = BiMambaBlock(d_model, rng.child("bimamba"))

    def _mix(self, x: np.ndarray, **kw) -> np.ndarray:
        return self.mixer.forward(x, **kw)


class ConformerBlock(_MacaronBlock):
    def __init__(self, d_model: int, rng: Rng, heads: int = 8):
        super().__init__(d_model, rng)
        self.mixer = AttentionLayer(d_model, rng.child("attn"), heads=heads)

    def _mix(self, x: np.ndarray, **kw) -> np.ndarray:
        return self.mixer(x)


class SpeechRecognizer(Module):
    """Frontend + macaron encoder stack, plus an optional token decoder.

    kind "mamba" uses ConMamba blocks and Mamba decoder layers with a
    cross block; kind "attention" uses Conformer blocks and transformer
    decoder layers with cross-attention (queries get sinusoidal
    positions).  A depth-0 decoder leaves an encoder-only model whose
    per-token logits come from the classifier head directly.
    """

    def __init__(self, d_model: int, encoder_depth: int, decoder_depth: int,
                 rng: Rng, kind: str = "mamba", heads: int = 8,
                 vocab: int = TEXT_VOCAB):
        self.d_model = d_model
        self.kind = kind
        self.vocab = vocab
        self.frontend = ConvFrontend(d_model, rng.child("frontend"))
        if kind == "mamba":
            self.encoder = [ConMambaBlock(d_model, rng.child(f"enc{i}"))
                            for i in range(encoder_depth)]
            self.decoder = [MambaDecoderLayer(d_model, rng.child(f"dec{i}"), cross=True)
                            for i in range(decoder_depth)]
        elif kind == "attention":
            self.encoder = [ConformerBlock(d_model, rng.child(f"enc{i}"), heads=heads)
                            for i in range(encoder_depth)]
            self.decoder = [TransformerDecoderLayer(d_model, rng.child(f"dec{i}"),
                                                    heads=heads, cross=True)
                            for i in range(decoder_depth)]
        else:
            raise ValueError(f"unknown kind {kind!r}")
        self.text_emb = rng.child("text_emb").normal(
            (vocab, d_model), std=1.0).astype(DTYPE)
        self.norm_head = LayerNorm(d_model)
        self.w_head = normal_weights(rng.child("head"), d_model, vocab)
        self.b_head = np.zeros(vocab, dtype=DTYPE)

    def encode(self, frames: np.ndarray, **kw) -> np.ndarray:
        h = self.frontend(frames)
        for block in self.encoder:
            h = block(h, **kw) if self.kind == "mamba" else block(h)
        return h

    def decode_logits(self, tokens: np.ndarray, memory: np.ndarray,
                      **kw) -> np.ndarray:
        """Teacher-forced decoder logits, one row per input token."""
        h = alloc.tracker.track(self.text_emb[np.asarray(tokens, np.int64)])
        if self.kind == "attention":
            h = alloc.tracker.track(
                (h + sinusoidal_positions(h.shape[0], self.d_model)).astype(DTYPE))
        for layer in self.decoder:
            h = layer(h, memory=memory, **kw) if self.kind == "mamba" \
                else layer(h, memory=memory)
        return linear(self.norm_head(h), self.w_head, self.b_head)

    forward = encode


# ---------------------------------------------------------------------------
# Synthesis


class CodecLm(Module):
    """Codec language model over 8 codebooks.

    The AR stack predicts codebook 1 left to right over the concatenation
    (phonemes, enrollment codebook-1 codes, generated codes); logits
    cover the 1024 codes plus EOS.  The NAR stack runs 7 bidirectional
    stages; stage j reads phonemes, the full 8-codebook enrollment
    (embeddings summed), and summed embeddings of target codebooks < j
    with a stage embedding added, and emits codebook j for every target
    position at once.

    ar_kind/nar_kind choose "mamba" or "attention" per stack, so the
    hybrid (transformer AR, Mamba NAR) assembles the same way as the pure
    variants.
    """

    def __init__(self, d_model: int, ar_depth: int, nar_depth: int, rng: Rng,
                 ar_kind: str = "mamba", nar_kind: str = "mamba", heads: int = 8):
        self.d_model = d_model
        self.ar_kind = ar_kind
        self.nar_kind = nar_kind
        emb = rng.child("emb")
        self.phoneme_emb = emb.child("phonemes").normal(
            (PHONEME_VOCAB, d_model), std=1.0).astype(DTYPE)
        self.code_embs = [
            emb.child(f"codebook{j}").normal((CODES + 1, d_model),
                                             std=1.0).astype(DTYPE)
            for j in range(CODEBOOKS)
        ]
        self.stage_emb = emb.child("stage").normal(
            (CODEBOOKS - 1, d_model), std=1.0).astype(DTYPE)

        if ar_kind == "mamba":
            self.ar_stack = [MambaDecoderLayer(d_model, rng.child(f"ar{i}"), ff=True)
                             for i in range(ar_depth)]
        elif ar_kind == "attention":
            self.ar_stack = [TransformerDecoderLayer(d_model, rng.child(f"ar{i}"),
                                                     heads=heads)
                             for i in range(ar_depth)]
        else:
            raise ValueError(f"unknown ar kind {ar_kind!r}")
        if nar_kind == "mamba":
            self.nar_stack = [MambaEncoderLayer(d_model, rng.child(f"nar{i}"), ff=True)
                              for i in range(nar_depth)]
        elif nar_kind == "attention":
            self.nar_stack = [TransformerEncoderLayer(d_model, rng.child(f"nar{i}"),
                                                      heads=heads)
                              for i in range(nar_depth)]
        else:
            raise ValueError(f"unknown nar kind {nar_kind!r}")

        self.ar_norm = LayerNorm(d_model)
        self.w_ar_head = normal_weights(rng.child("ar_head"), d_model, CODES + 1)
        self.b_ar_head = np.zeros(CODES + 1, dtype=DTYPE)
        self.nar_norm = LayerNorm(d_model)
        self.w_nar_head = normal_weights(rng.child("nar_head"), d_model, CODES)
        self.b_nar_head = np.zeros(CODES, dtype=DTYPE)

    # -- AR path ----------------------------------------------------------

    def _ar_embed(self, phonemes: np.ndarray, codes: np.ndarray) -> np.ndarray:
        parts = [self.phoneme_emb[np.asarray(phonemes, np.int64)],
                 self.code_embs[0][np.asarray(codes, np.int64)]]
        h = np.concatenate(parts, axis=0).astype(DTYPE)
        if self.ar_kind == "attention":
            h = (h + sinusoidal_positions(h.shape[0], self.d_model)).astype(DTYPE)
        return alloc.tracker.track(h)

    def ar_logits(self, phonemes, codes, **kw) -> np.ndarray:
        """Teacher-forced next-token logits at every position of the
        concatenated (phonemes, codes) sequence."""
        h = self._ar_embed(np.asarray(phonemes), np.asarray(codes))
        for layer in self.ar_stack:
            h = layer(h, **kw) if self.ar_kind == "mamba" else layer(h)
        return linear(self.ar_norm(h), self.w_ar_head, self.b_ar_head)

    def ar_generate(self, phonemes, enrollment_codes, max_steps: int,
                    sampler: str = "greedy", time_log: list | None = None):
        """Generate codebook-1 tokens autoregressively.

        The prefix (phonemes then enrollment) is consumed step by step
        through the same incremental state used for generation, so cost
        per emitted token never depends on how the prefix was fed.
        sampler "greedy" stops at EOS; "greedy-no-eos" masks EOS out and
        always emits max_steps tokens.  time_log, if a list, receives one
        perf-counter duration per generated token.
        """
        phonemes = np.asarray(phonemes, np.int64)
        enrollment_codes = np.asarray(enrollment_codes, np.int64)
        if phonemes.size == 0 or enrollment_codes.size == 0:
            raise ValueError("phonemes and enrollment must be non-empty")
        if max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if sampler not in ("greedy", "greedy-no-eos"):
            raise ValueError(f"unknown sampler {sampler!r}")

        states = [layer.initial_state() for layer in self.ar_stack]
        prefix = self._ar_embed(phonemes, enrollment_codes)

        def advance(h_t):
            for i, layer in enumerate(self.ar_stack):
                h_t, states[i] = layer.step(states[i], h_t)
            return linear(self.ar_norm(h_t.reshape(1, -1)),
                          self.w_ar_head, self.b_ar_head)[0]

        logits = None
        for t in range(prefix.shape[0]):
            logits = advance(prefix[t])

        out = []
        pos = prefix.shape[0]
        for _ in range(max_steps):
            t0 = time.perf_counter()
            row = logits.copy()
            if sampler == "greedy-no-eos":
                row[EOS] = -np.inf
            token = int(np.argmax(row))
            if token == EOS:
                break
            out.append(token)
            h = self.code_embs[0][token].copy()
            if self.ar_kind == "attention":
                h = (h + sinusoidal_positions(pos + 1, self.d_model)[pos]).astype(DTYPE)
            logits = advance(h)
            pos += 1
            if time_log is not None:
                time_log.append(time.perf_counter() - t0)
        return np.asarray(out, dtype=np.int64)

    # -- NAR path ---------------------------------------------------------

    def nar_stage(self, phonemes, enrollment_all, target_codes, stage: int,
                  **kw) -> np.ndarray:
        """Predict codebook `stage` (2..8) for every target position.

        target_codes is a list of the known target codebooks 1..stage-1,
        each shape (T,).  Returns (T,) argmax codes.
        """
        if not 2 <= stage <= CODEBOOKS:
            raise ValueError("stage must be in 2..8")
        phonemes = np.asarray(phonemes, np.int64)
        enrollment_all = np.asarray(enrollment_all, np.int64)
        if enrollment_all.ndim != 2 or enrollment_all.shape[1] != CODEBOOKS:
            raise ShapeError("enrollment must be (T_enroll, 8)")
        target = [np.asarray(c, np.int64) for c in target_codes]
        if len(target) != stage - 1:
            raise ShapeError(f"stage {stage} needs codebooks 1..{stage - 1}")

        ph = self.phoneme_emb[phonemes]
        enroll = np.zeros((enrollment_all.shape[0], self.d_model), dtype=np.float64)
        for j in range(CODEBOOKS):
            enroll += self.code_embs[j][enrollment_all[:, j]]
        tgt = np.zeros((target[0].shape[0], self.d_model), dtype=np.float64)
        for j, codes in enumerate(target):
            tgt += self.code_embs[j][codes]
        h = np.concatenate([ph, enroll, tgt], axis=0).astype(DTYPE)
        h = (h + self.stage_emb[stage - 2]).astype(DTYPE)
        if self.nar_kind == "attention":
            h = (h + sinusoidal_positions(h.shape[0], self.d_model)).astype(DTYPE)
        h = alloc.tracker.track(h)
        for layer in self.nar_stack:
            h = layer(h, **kw) if self.nar_kind == "mamba" else layer(h)
        logits = linear(self.nar_norm(h[-target[0].shape[0]:]),
                        self.w_nar_head, self.b_nar_head)
        return np.argmax(logits, axis=1).astype(np.int64)

    def nar_infer(self, phonemes, enrollment_all, codebook1, **kw) -> np.ndarray:
        """Run stages 2..8 sequentially; returns (T, 7) codes."""
        known = [np.asarray(codebook1, np.int64)]
        outputs = []
        for stage in range(2, CODEBOOKS + 1):
            predicted = self.nar_stage(phonemes, enrollment_all, known, stage, **kw)
            outputs.append(predicted)
            known.append(predicted)
        return np.stack(outputs, axis=1)

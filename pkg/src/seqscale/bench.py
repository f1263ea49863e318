"""Scaling measurements: peak allocation and wall time vs. sequence length.

The interesting quantity is how cost grows with token count, not the
absolute numbers, so everything here is built for exponent fitting:

* measurements repeat `reps` times after `warmup` discarded runs and
  keep every repetition's wall time (medians and bootstrap intervals
  come later);
* peak bytes come from the library's own allocation counter, which only
  sees the algorithmic f32 arrays, making the byte counts deterministic
  and exactly comparable across machines;
* `fit_exponent` fits log(metric) against log(tokens) over the larger
  half of the grid, where the asymptote has taken over from constants;
* `detect_crossover` finds where two cost curves intersect under
  piecewise-linear interpolation in log-log space.

Whole-model runs are driven by catalog presets; single-block runs cover
the primitive layers at lengths a full model would not fit.
"""

from __future__ import annotations

import csv
import dataclasses
import gc
import math
import os
import time

import numpy as np

from . import alloc
from .attention import AttentionLayer
from .layers import BiMambaBlock, UniMambaBlock
from .presets import ModelPreset, arch_kinds, build_model, load_preset
from .seqcore import DTYPE, Rng

MODES = ("forward", "ar_decode")
BLOCK_KINDS = ("attention", "uni_mamba", "bi_mamba")
CSV_HEADER = "preset,mode,duration_s,tokens,peak_bytes,wall_s_median,wall_s_p10,wall_s_p90"
_BOOTSTRAP_SAMPLES = 200


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    preset: str
    durations_s: tuple
    reps: int = 3
    warmup: int = 1
    mode: str = "forward"
    seed: int = 0
    workers: int = 1
    depth_scale: float = 1.0

    def __post_init__(self):
        durations = tuple(float(d) for d in self.durations_s)
        object.__setattr__(self, "durations_s", durations)
        if len(durations) == 0:
            raise ValueError("need at least one duration")
        if any(b <= a for a, b in zip(durations, durations[1:])):
            raise ValueError("durations must be strictly increasing")
        if self.reps < 3:
            raise ValueError("need at least 3 repetitions")
        if self.warmup < 0:
            raise ValueError("warmup count must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclasses.dataclass(frozen=True)
class BenchRecord:
    preset: str
    mode: str
    duration_s: float
    token_count: int
    peak_bytes: int
    wall_times_s: tuple
    seed: int = 0

    def __post_init__(self):
        if self.token_count < 1:
            raise ValueError("token count must be positive")
        if self.peak_bytes <= 0:
            raise ValueError("peak bytes must be positive")

    @property
    def wall_median(self) -> float:
        return float(np.median(self.wall_times_s))

    @property
    def wall_p10(self) -> float:
        return float(np.percentile(self.wall_times_s, 10))

    @property
    def wall_p90(self) -> float:
        return float(np.percentile(self.wall_times_s, 90))


@dataclasses.dataclass(frozen=True)
class ExponentFit:
    slope: float
    interval: tuple      # 95% bootstrap (lo, hi) over repetition resamples


@dataclasses.dataclass(frozen=True)
class Crossover:
    token_count: float
    duration_s: float


def _timed(run, reps: int, warmup: int):
    """Run `run()` warmup+reps times; return (walls of reps, peak bytes).

    The tracker is reset before each run so the peak covers exactly one
    pass; peaks are identical across runs by construction, the max is
    kept as a guard.
    """
    peak = 0
    walls = []
    for i in range(warmup + reps):
        gc.collect()
        alloc.tracker.reset()
        t0 = time.perf_counter()
        run()
        elapsed = time.perf_counter() - t0
        peak = max(peak, alloc.tracker.peak_bytes)
        if i >= warmup:
            walls.append(elapsed)
    return tuple(walls), peak


def _forward_runner(model, preset: ModelPreset, tokens: int, seed: int,
                    workers: int):
    """Build the input for one forward pass and return a nullary runner."""
    rng = Rng(seed).child(f"input{tokens}")
    kinds = arch_kinds(preset.name)
    kw = {"workers": workers} if "mamba" in kinds else {}
    if preset.task == "separation":
        audio = rng.normal(tokens * 8).astype(DTYPE)    # 8 samples per token
        return lambda: model.separate(audio, **kw)
    if preset.task == "asr":
        frames = rng.normal((tokens * 4, 80)).astype(DTYPE)
        return lambda: model.encode(frames, **kw)
    phonemes = rng.child("ph").integers(0, 64, 16)
    codes = rng.child("codes").integers(0, 1024, tokens)
    ar_kw = {"workers": workers} if kinds[0] == "mamba" else {}
    return lambda: model.ar_logits(phonemes, codes, **ar_kw)


def _decode_runner(model, preset: ModelPreset, tokens: int, seed: int):
    if preset.task != "tts":
        raise ValueError("ar_decode mode needs a synthesis preset")
    rng = Rng(seed).child(f"decode{tokens}")
    phonemes = rng.child("ph").integers(0, 64, 16)
    enroll = rng.child("en").integers(0, 1024, 8)
    return lambda: model.ar_generate(phonemes, enroll, max_steps=tokens,
                                     sampler="greedy-no-eos")


def measure(config: BenchConfig) -> list:
    """One BenchRecord per configured duration."""
    preset = load_preset(config.preset)
    if config.mode == "ar_decode" and preset.task != "tts":
        raise ValueError("ar_decode mode needs a synthesis preset")
    model = build_model(preset, seed=config.seed,
                        depth_scale=config.depth_scale)
    records = []
    for duration in config.durations_s:
        tokens = preset.tokens_for(duration)
        if tokens < 1:
            raise ValueError(
                f"duration {duration} s yields no tokens at "
                f"{preset.token_res_ms} ms resolution")
        if config.mode == "forward":
            run = _forward_runner(model, preset, tokens, config.seed,
                                  config.workers)
        else:
            run = _decode_runner(model, preset, tokens, config.seed)
        walls, peak = _timed(run, config.reps, config.warmup)
        records.append(BenchRecord(config.preset, config.mode, float(duration),
                                   tokens, peak, walls, config.seed))
    return records


def measure_blocks(kind: str, lengths, d_model: int = 16, heads: int = 1,
                   reps: int = 3, warmup: int = 1, seed: int = 0,
                   workers: int = 1) -> list:
    """Single-layer scaling runs at lengths full models would not reach.

    Token resolution is nominally 1 ms, so duration_s = L / 1000.
    """
    if kind not in BLOCK_KINDS:
        raise ValueError(f"kind must be one of {BLOCK_KINDS}")
    lengths = [int(x) for x in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or not lengths:
        raise ValueError("lengths must be strictly increasing and non-empty")
    rng = Rng(seed)
    if kind == "attention":
        block = AttentionLayer(d_model, rng.child("block"), heads=heads)
        run_block = lambda x: block(x)
    elif kind == "uni_mamba":
        block = UniMambaBlock(d_model, rng.child("block"))
        run_block = lambda x: block(x, workers=workers)
    else:
        block = BiMambaBlock(d_model, rng.child("block"))
        run_block = lambda x: block(x, workers=workers)
    records = []
    for length in lengths:
        x = rng.child(f"input{length}").normal((length, d_model)).astype(DTYPE)
        walls, peak = _timed(lambda: run_block(x), reps, warmup)
        records.append(BenchRecord(f"{kind}-block", "forward", length / 1000.0,
                                   length, peak, walls, seed))
    return records


# ---------------------------------------------------------------------------
# analysis


def _metric_values(records, metric: str) -> np.ndarray:
    if metric == "peak":
        return np.array([r.peak_bytes for r in records], dtype=np.float64)
    if metric == "wall":
        return np.array([r.wall_median for r in records], dtype=np.float64)
    raise ValueError('metric must be "peak" or "wall"')


def _fit_slope(tokens: np.ndarray, values: np.ndarray) -> float:
    slope, _ = np.polyfit(np.log(tokens), np.log(values), 1)
    return float(slope)


def fit_exponent(records, metric: str = "peak") -> ExponentFit:
    """Log-log slope over the upper half of the token grid.

    The small-L half is dominated by constant overheads and discarded;
    the bootstrap interval resamples repetitions within each record (for
    the wall metric; peak bytes have no repetition spread).
    """
    records = sorted(records, key=lambda r: r.token_count)
    tokens = np.array([r.token_count for r in records], dtype=np.float64)
    if len(records) < 4:
        raise ValueError("need at least 4 records to fit an exponent")
    if tokens[-1] < 8 * tokens[0] or np.unique(tokens).size != len(records):
        raise ValueError("token grid must span at least 8x without duplicates")
    keep = (len(records) + 1) // 2
    upper = records[-keep:]
    up_tokens = tokens[-keep:]
    values = _metric_values(upper, metric)
    if np.any(values <= 0):
        raise ValueError("metric values must be positive")
    slope = _fit_slope(up_tokens, values)
    if metric == "peak":
        return ExponentFit(slope, (slope, slope))
    rng = Rng(20_000 + len(records))
    slopes = []
    for _ in range(_BOOTSTRAP_SAMPLES):
        resampled = []
        for rec in upper:
            walls = np.asarray(rec.wall_times_s)
            idx = rng.integers(0, len(walls), len(walls))
            resampled.append(float(np.median(walls[idx])))
        slopes.append(_fit_slope(up_tokens, np.asarray(resampled)))
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return ExponentFit(slope, (float(lo), float(hi)))


def detect_crossover(records_a, records_b, metric: str = "peak"):
    """First intersection of the two log-log cost curves, or None.

    Both record lists must share the duration grid.  A sign change of
    log(b) - log(a) between adjacent grid points locates the crossing;
    an exact tie at an interior point flanked by opposite strict signs
    counts as a crossing at that point.  Curves that merely touch, or
    never meet, yield None.
    """
    a = sorted(records_a, key=lambda r: r.token_count)
    b = sorted(records_b, key=lambda r: r.token_count)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need two equally sized grids of at least 2 points")
    if any(x.token_count != y.token_count or x.duration_s != y.duration_s
           for x, y in zip(a, b)):
        raise ValueError("duration grids differ between record sets")
    tokens = np.array([r.token_count for r in a], dtype=np.float64)
    durations = np.array([r.duration_s for r in a], dtype=np.float64)
    diff = np.log(_metric_values(b, metric)) - np.log(_metric_values(a, metric))

    def interpolated(i, t):
        log_tok = (1 - t) * math.log(tokens[i]) + t * math.log(tokens[i + 1])
        log_dur = (1 - t) * math.log(durations[i]) + t * math.log(durations[i + 1])
        return Crossover(math.exp(log_tok), math.exp(log_dur))

    for i in range(len(diff) - 1):
        lo, hi = diff[i], diff[i + 1]
        if lo * hi < 0:
            return interpolated(i, lo / (lo - hi))
        if hi == 0 and lo != 0 and i + 2 < len(diff) and diff[i + 2] * lo < 0:
            return Crossover(float(tokens[i + 1]), float(durations[i + 1]))
    return None


# ---------------------------------------------------------------------------
# report files


def _format_value(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def emit_report(records, out_dir, basename: str = "bench"):
    """Write <basename>.csv and <basename>.svg under out_dir.

    Returns (csv_path, svg_path).
    """
    if not records:
        raise ValueError("no records to report")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    svg_path = os.path.join(out_dir, f"{basename}.svg")
    with open(csv_path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fields = [r.preset, r.mode, _format_value(r.duration_s),
                      _format_value(r.token_count), _format_value(r.peak_bytes),
                      _format_value(r.wall_median), _format_value(r.wall_p10),
                      _format_value(r.wall_p90)]
            fh.write(",".join(fields) + "\n")
    with open(svg_path, "w") as fh:
        fh.write(render_chart(records))
    return csv_path, svg_path


def parse_csv(path: str) -> list:
    """Read an emitted CSV back into row dicts with typed values."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER.split(","):
            raise ValueError(f"unexpected CSV header in {path}")
        rows = []
        for raw in reader:
            if len(raw) != 8:
                raise ValueError(f"malformed CSV row in {path}: {raw!r}")
            rows.append({
                "preset": raw[0], "mode": raw[1],
                "duration_s": float(raw[2]), "tokens": int(raw[3]),
                "peak_bytes": int(raw[4]), "wall_s_median": float(raw[5]),
                "wall_s_p10": float(raw[6]), "wall_s_p90": float(raw[7]),
            })
    return rows


_PALETTE = ("#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#d68910", "#17a589",
            "#7b241c", "#2e4053")


def _panel(series, metric_label, x0, width, height, value_of):
    """One log-log panel as SVG fragments; series is {label: records}."""
    pad = 46
    xs = [r.token_count for recs in series.values() for r in recs]
    ys = [value_of(r) for recs in series.values() for r in recs]
    lx0, lx1 = math.log10(min(xs)), math.log10(max(xs))
    ly0, ly1 = math.log10(min(ys)), math.log10(max(ys))
    if lx1 == lx0:
        lx1 = lx0 + 1
    if ly1 == ly0:
        ly1 = ly0 + 1

    def px(v):
        return x0 + pad + (math.log10(v) - lx0) / (lx1 - lx0) * (width - 2 * pad)

    def py(v):
        return height - pad - (math.log10(v) - ly0) / (ly1 - ly0) * (height - 2 * pad)

    parts = [
        f'<rect x="{x0 + pad}" y="{pad}" width="{width - 2 * pad}" '
        f'height="{height - 2 * pad}" fill="none" stroke="#888"/>',
        f'<text x="{x0 + width / 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">tokens (log)</text>',
        f'<text x="{x0 + width / 2}" y="{pad - 14}" text-anchor="middle" '
        f'font-size="13">{metric_label}</text>',
        f'<text x="{x0 + pad}" y="{height - pad + 14}" font-size="10" '
        f'text-anchor="middle">{10 ** lx0:.3g}</text>',
        f'<text x="{x0 + width - pad}" y="{height - pad + 14}" font-size="10" '
        f'text-anchor="middle">{10 ** lx1:.3g}</text>',
        f'<text x="{x0 + pad - 4}" y="{height - pad}" font-size="10" '
        f'text-anchor="end">{10 ** ly0:.3g}</text>',
        f'<text x="{x0 + pad - 4}" y="{pad + 10}" font-size="10" '
        f'text-anchor="end">{10 ** ly1:.3g}</text>',
    ]
    for idx, (label, recs) in enumerate(sorted(series.items())):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{px(r.token_count):.1f},{py(value_of(r)):.1f}"
                       for r in sorted(recs, key=lambda r: r.token_count))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.6"/>')
        parts.append(f'<text x="{x0 + pad + 6}" y="{pad + 16 + 13 * idx}" '
                     f'font-size="11" fill="{color}">{label}</text>')
    return "".join(parts)


def render_chart(records) -> str:
    series = {}
    for r in records:
        series.setdefault(f"{r.preset}/{r.mode}", []).append(r)
    width, height = 480, 360
    body = (_panel(series, "peak bytes", 0, width, height,
                   lambda r: r.peak_bytes)
            + _panel(series, "wall seconds (median)", width, width, height,
                     lambda r: max(r.wall_median, 1e-9)))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{2 * width}" height="{height}" '
            f'viewBox="0 0 {2 * width} {height}">'
            f'<rect width="{2 * width}" height="{height}" fill="white"/>'
            f"{body}</svg>\n")

"""Command-line entry point.

    seqscale verify {ssm|layers|attention|archs|all}
    seqscale bench --presets a,b --durations 1,2,4 [--mode ...] --out-dir DIR
    seqscale generate --preset vall-m --max-steps N --out-dir DIR
    seqscale report --out-dir DIR

Exit codes: 0 success, 1 check failure or I/O failure, 2 usage error.
`--out-dir` may be omitted when the MAMBA_BENCH_OUT environment variable
is set; every file the tool writes lands under that directory.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import bench
from .archs import CodecLm, ConMambaBlock, TasNetModel, tokens_for_duration
from .attention import AttentionLayer, KvCache, TransformerDecoderLayer, attn_step
from .layers import BiMambaBlock, MambaDecoderLayer, UniMambaBlock, cross_mamba
from .presets import build_model, load_preset
from .seqcore import DTYPE, Rng, layer_norm
from .ssm import (
    STATE_SIZE,
    make_lti_params,
    make_params,
    ssm_kernel_conv,
    ssm_recurrence,
    ssm_scan,
)

OUT_ENV = "MAMBA_BENCH_OUT"
SCOPES = ("ssm", "layers", "attention", "archs", "all")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# verification suites
#
# Each suite returns (max_abs_error, ok).  The error aggregates the
# numeric comparisons; ok additionally folds in the yes/no structural
# checks (causality, length contracts) that have no meaningful magnitude.


def _suite_ssm():
    errs, ok = [0.0], True
    for seed, (length, channels) in enumerate(((64, 8), (257, 8), (1000, 16))):
        rng = Rng(9000 + seed)
        params = make_params(rng.child("p"), channels, STATE_SIZE)
        x = rng.child("x").normal((length, channels)).astype(DTYPE)
        errs.append(float(np.max(np.abs(
            ssm_scan(x, params) - ssm_recurrence(x, params)))))

    rng = Rng(9100)
    params = make_params(rng.child("p"), 8, STATE_SIZE)
    x = rng.child("x").normal((500, 8)).astype(DTYPE)
    # chunk size changes the reduction order, so only closeness is promised;
    # repeating the same call must be bit-identical
    errs.append(float(np.max(np.abs(
        ssm_scan(x, params, chunk=64) - ssm_scan(x, params, chunk=512)))))
    if not np.array_equal(ssm_scan(x, params, chunk=64),
                          ssm_scan(x, params, chunk=64)):
        ok = False

    lti = make_lti_params(Rng(9200).child("p"), 6, STATE_SIZE)
    x = Rng(9200).child("x").normal((128, 6)).astype(DTYPE)
    errs.append(float(np.max(np.abs(
        ssm_kernel_conv(x, lti) - ssm_recurrence(x, lti)))))

    err = max(errs)
    return err, ok and err < 1e-5


def _suite_layers():
    errs, ok = [0.0], True
    rng = Rng(9300)
    uni = UniMambaBlock(12, rng.child("uni"))
    x = rng.child("x").normal((120, 12)).astype(DTYPE)

    edited = x.copy()
    edited[60:] += 1.0
    if not np.array_equal(uni.forward(x)[:60], uni.forward(edited)[:60]):
        ok = False

    state = uni.initial_state()
    stepped = np.empty_like(x)
    for t in range(x.shape[0]):
        stepped[t], state = uni.step(state, x[t])
    errs.append(float(np.max(np.abs(stepped - uni.forward(x)))))

    bi = BiMambaBlock(12, rng.child("bi"))
    if np.array_equal(bi.forward(x)[:60], bi.forward(edited)[:60]):
        ok = False        # a bidirectional block must see the whole input

    memory = rng.child("m").normal((9, 12)).astype(DTYPE)
    query = rng.child("q").normal((5, 12)).astype(DTYPE)
    out = cross_mamba(uni, memory, query)
    if out.shape != (5, 12):
        ok = False
    bumped = memory.copy()
    bumped[0] += 1.0
    if np.array_equal(cross_mamba(uni, bumped, query)[0], out[0]):
        ok = False        # the first memory token must reach the first output

    err = max(errs)
    return err, ok and err < 1e-4


def _naive_attention(layer, x):
    h = layer.heads
    q = (x @ layer.w_q + layer.b_q).astype(np.float64)
    k = (x @ layer.w_k + layer.b_k).astype(np.float64)
    v = (x @ layer.w_v + layer.b_v).astype(np.float64)
    d = x.shape[1] // h
    out = np.empty((x.shape[0], x.shape[1]))
    for i in range(h):
        qi, ki, vi = q[:, i * d:(i + 1) * d], k[:, i * d:(i + 1) * d], \
            v[:, i * d:(i + 1) * d]
        s = qi @ ki.T / np.sqrt(d)
        if layer.causal:
            s += np.triu(np.full(s.shape, -np.inf), 1)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, i * d:(i + 1) * d] = w @ vi
    return out @ layer.w_o + layer.b_o


def _suite_attention():
    errs, ok = [0.0], True
    rng = Rng(9400)
    x = rng.child("x").normal((48, 16)).astype(DTYPE)

    plain = AttentionLayer(16, rng.child("plain"), heads=4)
    errs.append(float(np.max(np.abs(plain(x) - _naive_attention(plain, x)))))

    causal = AttentionLayer(16, rng.child("causal"), heads=4, causal=True)
    errs.append(float(np.max(np.abs(causal(x) - _naive_attention(causal, x)))))
    edited = x.copy()
    edited[24:] += 1.0
    if not np.array_equal(causal(x)[:24], causal(edited)[:24]):
        ok = False

    cache = KvCache(causal.heads, 16 // causal.heads)
    stepped = np.stack([attn_step(causal, cache, row) for row in x])
    errs.append(float(np.max(np.abs(stepped - causal(x)))))

    err = max(errs)
    return err, ok and err < 1e-4


def _suite_archs():
    errs, ok = [0.0], True
    if (tokens_for_duration(10_000, 1), tokens_for_duration(10_000, 40),
            tokens_for_duration(10_000, 40 / 3)) != (10_000, 250, 750):
        ok = False

    rng = Rng(9500)
    tasnet = TasNetModel(16, 1, rng.child("tasnet"))
    audio = rng.child("audio").normal(2048).astype(DTYPE)
    enc = tasnet.encode(audio)
    recon = tasnet.decode(enc, audio.shape[0])
    tasnet.masks = lambda feats, **kw: np.stack(
        [np.ones_like(enc), np.zeros_like(enc)])
    split = tasnet.separate(audio)
    if not (np.array_equal(split[0], recon) and not split[1].any()):
        ok = False

    block = ConMambaBlock(16, rng.child("block"))
    block.ff1.w2[...] = 0.0
    block.ff2.w2[...] = 0.0
    block.conv.w_out[...] = 0.0
    block.mixer.w_out[...] = 0.0
    x = rng.child("bx").normal((20, 16)).astype(DTYPE)
    if not np.array_equal(block(x), layer_norm(x)):
        ok = False

    lm = CodecLm(16, 1, 1, rng.child("lm"))
    phonemes = np.array([1, 2, 3])
    codes = rng.child("codes").integers(0, 1024, 8)
    edited = codes.copy()
    edited[5:] = (edited[5:] + 3) % 1024
    if not np.array_equal(lm.ar_logits(phonemes, codes)[:8],
                          lm.ar_logits(phonemes, edited)[:8]):
        ok = False

    dec = MambaDecoderLayer(12, rng.child("dec"), ff=True)
    seq = rng.child("seq").normal((40, 12)).astype(DTYPE)
    state = dec.initial_state()
    stepped = np.empty_like(seq)
    for t in range(seq.shape[0]):
        stepped[t], state = dec.step(state, seq[t])
    errs.append(float(np.max(np.abs(stepped - dec.forward(seq)))))

    tdec = TransformerDecoderLayer(12, rng.child("tdec"), heads=3)
    cache = tdec.initial_state()
    stepped2 = np.empty_like(seq)
    for t in range(seq.shape[0]):
        stepped2[t], cache = tdec.step(cache, seq[t])
    errs.append(float(np.max(np.abs(stepped2 - tdec.forward(seq)))))

    err = max(errs)
    return err, ok and err < 1e-4


SUITES = {"ssm": _suite_ssm, "layers": _suite_layers,
          "attention": _suite_attention, "archs": _suite_archs}


def cmd_verify(scope: str) -> int:
    if scope not in SCOPES:
        raise UsageError(f"unknown scope {scope!r}; choose from {SCOPES}")
    names = list(SUITES) if scope == "all" else [scope]
    failed = False
    for name in names:
        err, ok = SUITES[name]()
        print(f"{name:<10} max-abs-error {err:.3e}  {'ok' if ok else 'FAIL'}")
        failed = failed or not ok
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# benchmarking and reports


def _resolve_out_dir(args) -> str:
    out = args.out_dir or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"--out-dir or the {OUT_ENV} environment variable "
                         "is required")
    return out


def _print_analysis(records) -> None:
    by_preset = {}
    for rec in records:
        by_preset.setdefault(rec.preset, []).append(rec)
    for name, recs in by_preset.items():
        for metric in ("peak", "wall"):
            try:
                fit = bench.fit_exponent(recs, metric)
            except ValueError:
                continue
            lo, hi = fit.interval
            print(f"{name} {metric} slope {fit.slope:.3f} "
                  f"[{lo:.3f}, {hi:.3f}]")
    for (a, aprs), (b, bprs) in itertools.combinations(by_preset.items(), 2):
        for metric in ("peak", "wall"):
            try:
                hit = bench.detect_crossover(aprs, bprs, metric)
            except ValueError:
                continue
            where = (f"{hit.duration_s:.3g} s ({hit.token_count:.0f} tokens)"
                     if hit else "none in range")
            print(f"crossover {a} vs {b} [{metric}]: {where}")


def cmd_bench(args) -> int:
    out_dir = _resolve_out_dir(args)
    presets = [p for p in args.presets.split(",") if p]
    if not presets:
        raise UsageError("--presets needs at least one name")
    try:
        durations = tuple(float(d) for d in args.durations.split(","))
    except ValueError:
        raise UsageError(f"cannot parse --durations {args.durations!r}")
    records = []
    for name in presets:
        config = bench.BenchConfig(name, durations, reps=args.reps,
                                   warmup=args.warmup, mode=args.mode,
                                   seed=args.seed, workers=args.workers)
        records.extend(bench.measure(config))
    try:
        csv_path, svg_path = bench.emit_report(records, out_dir)
    except OSError as exc:
        print(f"cannot write report under {out_dir}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {csv_path}")
    print(f"wrote {svg_path}")
    _print_analysis(records)
    return 0


def cmd_generate(args) -> int:
    preset = load_preset(args.preset)
    if preset.task != "tts":
        raise UsageError(f"preset {preset.name!r} is a {preset.task} model; "
                         "generation needs a tts preset")
    if args.text_len < 1 or args.enroll_len < 1:
        raise UsageError("text and enrollment lengths must be positive")
    if args.max_steps < 1:
        raise UsageError("--max-steps must be positive")
    out_dir = _resolve_out_dir(args)
    rng = Rng(args.seed)
    phonemes = rng.child("text").integers(0, 64, args.text_len)
    enroll = rng.child("enroll").integers(0, 1024, args.enroll_len)
    model = build_model(preset, seed=args.seed)
    latencies = []
    tokens = model.ar_generate(phonemes, enroll, args.max_steps,
                               time_log=latencies)

    os.makedirs(out_dir, exist_ok=True)
    token_path = os.path.join(out_dir, "tokens.txt")
    latency_path = os.path.join(out_dir, "latencies.txt")
    try:
        with open(token_path, "w") as fh:
            fh.writelines(f"{t}\n" for t in tokens)
        with open(latency_path, "w") as fh:
            fh.writelines(format(t, ".9e") + "\n" for t in latencies)
    except OSError as exc:
        print(f"cannot write under {out_dir}: {exc}", file=sys.stderr)
        return 1
    print(f"generated {len(tokens)} tokens -> {token_path}")
    print(f"per-step latencies -> {latency_path}")
    return 0


def cmd_report(args) -> int:
    out_dir = _resolve_out_dir(args)
    csv_path = os.path.join(out_dir, "bench.csv")
    try:
        rows = bench.parse_csv(csv_path)
    except OSError as exc:
        print(f"cannot read {csv_path}: {exc}", file=sys.stderr)
        return 1
    if not rows:
        print(f"{csv_path} holds no measurements", file=sys.stderr)
        return 1
    records = [bench.BenchRecord(row["preset"], row["mode"], row["duration_s"],
                                 row["tokens"], row["peak_bytes"],
                                 (row["wall_s_median"],) * 3)
               for row in rows]
    svg_path = os.path.join(out_dir, "bench.svg")
    try:
        with open(svg_path, "w") as fh:
            fh.write(bench.render_chart(records))
    except OSError as exc:
        print(f"cannot write {svg_path}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {svg_path}")
    _print_analysis(records)
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqscale",
        description="sequence-model scaling toolkit: verification suites, "
                    "benchmarks, toy generation, report rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="PRNG seed for weights and inputs (default 0)")
        p.add_argument("--out-dir", default=None,
                       help=f"output directory (default ${OUT_ENV})")

    p_verify = sub.add_parser("verify", help="run numeric oracle suites")
    p_verify.add_argument("scope", choices=SCOPES)

    p_bench = sub.add_parser("bench", help="measure cost vs. duration")
    p_bench.add_argument("--presets", required=True,
                         help="comma-separated catalog names")
    p_bench.add_argument("--durations", required=True,
                         help="comma-separated seconds, strictly increasing")
    p_bench.add_argument("--mode", choices=bench.MODES, default="forward")
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--warmup", type=int, default=1)
    common(p_bench)

    p_gen = sub.add_parser("generate", help="autoregressive toy generation")
    p_gen.add_argument("--preset", required=True)
    p_gen.add_argument("--text-len", type=int, default=32)
    p_gen.add_argument("--enroll-len", type=int, default=8)
    p_gen.add_argument("--max-steps", type=int, required=True)
    common(p_gen)

    p_rep = sub.add_parser("report",
                           help="re-render chart and analysis from bench.csv")
    common(p_rep)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.scope)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "generate":
            return cmd_generate(args)
        return cmd_report(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

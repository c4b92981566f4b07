"""Command-line entry point: ``streamtok <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from . import synthcorpus as sc
from .evalkit import EvalReport, delta_len, evaluate, fmt, token_error_rate, units_to_runs
from .gradsuite import CHECKS, THRESHOLD, run_suite
from .model import ModelConfig, Tokenizer, TokenRecord, model_config_for
from .streamrt import StreamConfig, StreamError, run_stream
from .trainer import ABLATIONS, CheckpointError, TrainConfig, TrainingError, load_model, run_training
from .unitdec import generate

FORMATS = """\
file formats (all binary fields little-endian):
  TSFR frame file    magic b"TSFR", u16 version=1, u32 T, u32 D, then T*D float32 row-major
  TSUN unit file     magic b"TSUN", u16 version=1, u32 T, then T uint16 unit ids
  TSCK checkpoint    magic b"TSCK", u16 version=1, u32 n, n bytes of UTF-8 key=value config
                     lines, then tensors until EOF: u16 name length, name, u8 rank,
                     rank*u32 dims, float32 data (optimizer moments stored as opt.m.*/opt.v.*)
  manifest (.tsv)    utt_id, text tokens, frames path, units path, char durations
                     [, char starts when not contiguous]; lists are space-separated ints
  token records      utt_id <TAB> text tokens <TAB> FSQ indices <TAB> anchor frames
  stream trace       wall_clock_ns <TAB> event <TAB> logical frame <TAB> payload
  config files       key=value lines; keys prefixed corpus., encoder., fsq., decoder., train.
  run-manifest       key=value lines: command, argv, config hash, seed, versions
"""


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------

def _read_config(path) -> list[str]:
    if path is None:
        return []
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            if "=" not in line:
                raise UsageError(f"{path}: expected key=value, got {line!r}")
            lines.append(line)
    return lines


def _merge(base: list[str], overrides: list[str]) -> list[str]:
    out = dict(line.partition("=")[::2] for line in base)
    for line in overrides:
        k, _, v = line.partition("=")
        if k not in out:
            raise UsageError(f"unknown config key {k!r}")
        out[k] = v
    return sorted(f"{k}={v}" for k, v in out.items())


def _config_hash(lines: list[str]) -> str:
    return hashlib.sha256("\n".join(sorted(lines)).encode()).hexdigest()[:16]


def write_run_manifest(out_dir, command: str, argv, config_lines: list[str], seed):
    """Reproducibility record; deliberately free of wall-clock fields."""
    lines = [f"command={command}", f"argv={' '.join(argv)}", f"config_hash={_config_hash(config_lines)}",
             f"seed={seed}", f"streamtok_version={__version__}", f"numpy_version={np.__version__}",
             f"python_version={platform.python_version()}"]
    lines += [f"config.{line}" for line in sorted(config_lines)]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run-manifest").write_text("\n".join(lines) + "\n")


def _ints(xs) -> str:
    return " ".join(str(int(x)) for x in xs)


def _ensure_empty(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force)")


def _load_utts(corpus_dir, manifest: str) -> tuple[sc.CorpusConfig, list[sc.Utterance]]:
    root = Path(corpus_dir)
    cfg = sc.CorpusConfig.from_lines((root / "corpus.cfg").read_text().splitlines())
    return cfg, sc.read_manifest(root, manifest)


def format_token_record(uid: str, rec: TokenRecord) -> str:
    q = [] if rec.indices is None else rec.indices
    return f"{uid}\t{_ints(rec.tokens)}\t{_ints(q)}\t{_ints(rec.anchors)}"


def parse_token_records(text: str, source: str = "<tokens>") -> list[tuple[str, list[int], list[int], list[int]]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{source}:{n}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            toks, q, anchors = ([int(x) for x in p.split()] for p in parts[1:])
        except ValueError:
            raise ValueError(f"{source}:{n}: non-integer field") from None
        if not (len(toks) == len(q) == len(anchors)):
            raise ValueError(f"{source}:{n}: tokens, indices and anchors differ in length")
        out.append((parts[0], toks, q, anchors))
    return out


# -- commands -------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    lines = [f"corpus.{line}" for line in sc.CorpusConfig().to_lines()]
    flags = {"seed": args.seed, "num_utterances": args.num, "alphabet_size": args.alphabet,
             "feature_dim": args.feature_dim, "noise_sigma": args.noise, "unit_variants": args.variants}
    over = _read_config(args.config)
    over += [f"corpus.{k}={v}" for k, v in flags.items() if v is not None]
    if args.frames_per_char:
        over.append(f"corpus.frames_per_char={_ints(args.frames_per_char)}")
    if args.utt_len:
        over.append(f"corpus.utterance_len={_ints(args.utt_len)}")
    lines = _merge(lines, over)
    try:
        cfg = sc.CorpusConfig.from_lines([line[len("corpus."):] for line in lines])
    except (sc.CorpusError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if args.longform is not None and args.longform < 2:
        raise UsageError("--longform needs k >= 2")
    out = Path(args.out)
    _ensure_empty(out, args.force)
    corpus = sc.generate_corpus(cfg)
    sc.write_corpus(corpus, out)
    train, test = corpus.split()
    sc.write_corpus(corpus, out, "train.tsv", train)
    sc.write_corpus(corpus, out, "test.tsv", test)
    if args.longform is not None:
        pool = test if len(test) >= args.longform else corpus.utterances
        if len(pool) < args.longform:
            raise UsageError(f"--longform {args.longform} needs at least that many utterances")
        lf = sc.make_longform_set(pool, cfg, count=args.longform_count, k=args.longform, seed=cfg.seed)
        sc.write_corpus(corpus, out, "longform.tsv", lf)
    write_run_manifest(out, "gen-corpus", sys.argv[1:], lines, cfg.seed)
    print(f"wrote {len(corpus.utterances)} utterances ({len(train)} train, {len(test)} test) to {out}")
    return 0


def _train_configs(args, corpus_cfg: sc.CorpusConfig) -> tuple[ModelConfig, TrainConfig, list[str]]:
    mcfg = model_config_for(corpus_cfg, args.N, args.M, seed=args.seed)
    base = mcfg.to_lines() + TrainConfig(seed=args.seed).to_lines()
    over = _read_config(args.config)
    for k, v in (("steps_stage0", args.steps0), ("steps_stage1", args.steps1), ("steps_stage2", args.steps2),
                 ("warmup_steps", args.warmup)):
        if v is not None:
            over.append(f"train.{k}={v}")
    lines = _merge(base, over)
    try:
        mcfg = ModelConfig.from_lines([line for line in lines if not line.startswith("train.")])
        tcfg = TrainConfig.from_lines(lines)
    except (ValueError, CheckpointError) as exc:
        raise UsageError(str(exc)) from exc
    return mcfg, tcfg, lines


def cmd_train(args) -> int:
    corpus_cfg, train = _load_utts(args.corpus, args.manifest)
    mcfg, tcfg, lines = _train_configs(args, corpus_cfg)
    out = Path(args.out)
    stages = (0, 1, 2) if args.stage == "all" else (int(args.stage),)
    start = None
    if stages[0] > 0:
        prev = 0 if (stages[0] == 2 and args.ablation == "no-bistage") else stages[0] - 1
        path = out / f"ckpt-stage{prev}.tsck"
        if not path.exists():
            raise TrainingError(f"stage {stages[0]} needs {path}; run the earlier stage first")
        start = load_model(path)
        if start.cfg != mcfg:
            raise TrainingError(f"{path} was trained with a different model config")
    if args.ablation == "no-bistage" and stages == (1,):
        raise UsageError("stage 1 is skipped under --ablation no-bistage")
    if args.ablation == "no-joint" and stages == (2,):
        raise UsageError("stage 2 is skipped under --ablation no-joint")
    write_run_manifest(out, "train", sys.argv[1:], lines + [f"ablation={args.ablation}"], tcfg.seed)
    t0 = time.perf_counter()
    _, timings = run_training(train, corpus_cfg, mcfg, tcfg, args.ablation, stages, out, start,
                              verbose=not args.quiet)
    for k in sorted(timings):
        print(f"stage{k}_seconds={fmt(timings[k])}")
    print(f"total_seconds={fmt(time.perf_counter() - t0)}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.ckpt)
    _, utts = _load_utts(args.corpus, args.manifest)
    lines = []
    for u in utts:
        rec = model.encode(u.frames, u.transcript if args.transcript_mode == "ext" else None)
        lines.append(format_token_record(u.id, rec))
    text = "\n".join(lines) + ("\n" if lines else "")
    _write_or_print(args.out, text)
    return 0


def _write_or_print(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_decode(args) -> int:
    model = load_model(args.ckpt)
    recs = parse_token_records(Path(args.tokens).read_text(), args.tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truncated = 0
    for uid, toks, q, anchors in recs:
        gen = generate(model.dec, toks, model.latents_from_indices(q))
        truncated += gen.truncated
        sc.write_units(out / f"{uid}.tsun", gen.units)
    print(f"decoded={len(recs)} truncated={truncated}")
    return 0


def cmd_stream(args) -> int:
    model = load_model(args.ckpt)
    _, utts = _load_utts(args.corpus, args.manifest)
    cfg = StreamConfig(args.chunk, args.window)
    out = Path(args.out)
    for sub in ("units", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    tok_lines, report = [], []
    for u in utts:
        res = run_stream(model, u.frames, cfg, decode=not args.encode_only)
        rec = TokenRecord(res.text, [t.anchor for t in res.tokens], res.indices, res.z)
        tok_lines.append(format_token_record(u.id, rec))
        if not args.encode_only:
            sc.write_units(out / "units" / f"{u.id}.tsun", res.units)
        res.log.write_trace(out / "traces" / f"{u.id}.trace")
        report.append(f"[{u.id}]\n{res.report.to_text()}")
    (out / "tokens.tsv").write_text("\n".join(tok_lines) + ("\n" if tok_lines else ""))
    (out / "report.txt").write_text("".join(report))
    print(f"streamed={len(utts)} chunk_frames={cfg.chunk_frames}")
    return 0


def longform_rows(model, utts, corpus_cfg, windows, chunk: int, trace_dir=None) -> list[dict]:
    rows = []
    for W in windows:
        cfg = StreamConfig(chunk, W)
        ters, dls, enc_s, dec_s, fcls, frames, trunc = [], [], 0.0, 0.0, [], 0, 0
        for u in utts:
            res = run_stream(model, u.frames, cfg)
            chars, _ = units_to_runs(res.units, corpus_cfg)
            ters.append(token_error_rate(u.transcript, chars))
            dls.append(delta_len(u.units, res.units))
            enc_s += res.report.encode_s
            dec_s += res.report.decode_s
            fcls.append(res.report.fcl_ms)
            frames += res.report.total_frames
            trunc += res.truncated
            if trace_dir is not None:
                Path(trace_dir).mkdir(parents=True, exist_ok=True)
                res.log.write_trace(Path(trace_dir) / f"{u.id}.w{W}.trace")
        t_audio = frames * cfg.frame_period_ms / 1000.0
        rows.append({"window": W, "ter": float(np.mean(ters)), "delta_len": float(np.mean(dls)),
                     "rtf_encode": enc_s / t_audio, "rtf_decode": dec_s / t_audio,
                     "fcl_ms": float(np.mean(fcls)), "truncated": trunc})
    return rows


LONGFORM_COLS = ("window", "ter", "delta_len", "rtf_encode", "rtf_decode", "fcl_ms", "truncated")


def cmd_longform(args) -> int:
    model = load_model(args.ckpt)
    corpus_cfg, utts = _load_utts(args.corpus, args.manifest)
    if args.limit:
        utts = utts[:args.limit]
    traces = Path(args.out) / "traces" if args.out else None
    rows = longform_rows(model, utts, corpus_cfg, args.window, args.chunk, traces)
    text = "\t".join(LONGFORM_COLS) + "\n" + "".join(
        "\t".join(fmt(r[c]) for c in LONGFORM_COLS) + "\n" for r in rows)
    if args.out:
        _write_or_print(Path(args.out) / "longform.tsv", text)
    sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    corpus_cfg, utts = _load_utts(args.corpus, args.manifest)
    rep: EvalReport = evaluate(model, utts, corpus_cfg, args.transcript_mode, bypass=args.bypass)
    if args.stream:
        cfg = StreamConfig(args.chunk)
        reports = [run_stream(model, u.frames, cfg).report for u in utts]
        frames = sum(r.total_frames for r in reports)
        t_audio = frames * cfg.frame_period_ms / 1000.0
        rep.rtf_encode = sum(r.encode_s for r in reports) / t_audio
        rep.rtf_decode = sum(r.decode_s for r in reports) / t_audio
        rep.rtf_total = rep.rtf_encode + rep.rtf_decode
        rep.fcl_ms = float(np.mean([r.fcl_ms for r in reports]))
    sys.stdout.write(rep.to_csv() if args.csv else rep.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(rep.to_text())
        (out / "utterances.tsv").write_text(rep.table())
        (out / "table.csv").write_text(rep.to_csv())
    return 0


def cmd_gradcheck(args) -> int:
    res = run_suite(tuple(range(args.seeds)), args.op)
    bad = 0
    for op, err in res.items():
        ok = err < THRESHOLD
        bad += not ok
        print(f"{op}\t{fmt(err)}\t{'ok' if ok else 'FAIL'}")
    return 1 if bad else 0


def write_pgm(path, m: np.ndarray):
    """Binary graymap (P5), one pixel per cell, darkest = largest weight."""
    m = np.asarray(m, dtype=np.float64)
    top = m.max() if m.size and m.max() > 0 else 1.0
    px = (255 - np.round(m / top * 255)).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def cmd_attnmap(args) -> int:
    model = load_model(args.ckpt)
    _, utts = _load_utts(args.corpus, args.manifest)
    pick = [u for u in utts if u.id == args.utt] if args.utt else utts[:1]
    if not pick:
        raise UsageError(f"utterance {args.utt!r} not in {args.manifest}")
    u = pick[0]
    _, lat, _ = model.enc.encode(u.frames, u.transcript if args.transcript_mode == "ext" else None)
    A = np.asarray(lat.attention, dtype=np.float64).reshape(len(lat), -1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.txt").write_text("".join(" ".join(f"{x:.6g}" for x in row) + "\n" for row in A))
    write_pgm(f"{out}.pgm", A)
    peaks = A.argmax(1) if len(A) else np.zeros(0, np.int64)
    print(f"tokens={len(A)} frames={A.shape[1] if len(A) else len(u.frames)} "
          f"monotone={int(bool(np.all(np.diff(peaks) >= 0)))}")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamtok", description="Streamable text-aligned speech tokenizer (desk scale).",
                                epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"streamtok {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus (frames, units, manifests)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num", type=int, help="number of utterances")
    g.add_argument("--alphabet", type=int)
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--noise", type=float, help="frame noise sigma")
    g.add_argument("--variants", type=int, help="unit variants per character")
    g.add_argument("--frames-per-char", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--utt-len", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--longform", type=int, metavar="K", help="also write longform.tsv of K-segment items")
    g.add_argument("--longform-count", type=int, default=87)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")

    t = add("train", cmd_train, "run training stages; writes ckpt-stage{k}.tsck and train.log")
    t.add_argument("--corpus", required=True)
    t.add_argument("--manifest", default="train.tsv")
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("0", "1", "2", "all"), default="all")
    t.add_argument("--ablation", choices=ABLATIONS, default="none")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--N", type=int, default=2)
    t.add_argument("--M", type=int, default=5)
    t.add_argument("--steps0", type=int)
    t.add_argument("--steps1", type=int)
    t.add_argument("--steps2", type=int)
    t.add_argument("--warmup", type=int, help="warmup steps per stage")
    t.add_argument("--config")
    t.add_argument("--quiet", action="store_true")

    for name, fn, help_ in (("encode", cmd_encode, "offline encode to token records"),
                            ("eval", cmd_eval, "offline reconstruction metrics"),
                            ("attnmap", cmd_attnmap, "dump aggregator attention (text matrix + PGM)"),
                            ("stream", cmd_stream, "chunked streaming encode/decode with traces"),
                            ("longform", cmd_longform, "windowed longform streaming sweep")):
        sp = add(name, fn, help_)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--manifest", default="longform.tsv" if name == "longform" else "test.tsv")
        if name in ("encode", "eval", "attnmap"):
            sp.add_argument("--transcript-mode", choices=("ctc", "ext"), default="ctc")
        if name in ("stream", "longform", "eval"):
            sp.add_argument("--chunk", type=int, default=8)
        if name == "encode":
            sp.add_argument("--out", help="token record file (default stdout)")
        elif name == "eval":
            sp.add_argument("--bypass", action="store_true", help="skip the quantizer")
            sp.add_argument("--stream", action="store_true", help="also measure RTF/FCL by streaming")
            sp.add_argument("--csv", action="store_true", help="print comma-separated columns instead")
            sp.add_argument("--out")
        elif name == "attnmap":
            sp.add_argument("--utt")
            sp.add_argument("--out", required=True, help="output prefix (.txt and .pgm)")
        elif name == "stream":
            sp.add_argument("--window", type=int)
            sp.add_argument("--encode-only", action="store_true")
            sp.add_argument("--out", required=True)
        elif name == "longform":
            sp.add_argument("--window", type=int, nargs="+", default=[64, 96, 128, 192])
            sp.add_argument("--limit", type=int, help="use only the first N items")
            sp.add_argument("--out")

    d = add("decode", cmd_decode, "token records to TSUN unit files")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--tokens", required=True)
    d.add_argument("--out", required=True)

    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    gc.add_argument("--seeds", type=int, default=3)
    gc.add_argument("--op", nargs="+", choices=tuple(CHECKS))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"streamtok {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, StreamError, TrainingError, CheckpointError,
            nc.ConfigError) as exc:
        print(f"streamtok {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

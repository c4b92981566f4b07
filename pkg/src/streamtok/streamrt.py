"""Chunked streaming: incremental encoding, quantization and unit generation.

Frames arrive ``chunk_frames`` at a time.  The encoder appends to per-layer
key/value caches, greedy CTC finalizes tokens as soon as a different symbol
follows them, each finalized token is aggregated and quantized right away,
and the unit generator emits an M-unit chunk whenever its N aligned tokens
are known.  Every step is logged as a timestamped event; latency and
real-time factors are computed from that log.

Longform input is cut into windows.  Caches and the unit generator restart
at each window; the greedy CTC state crosses the boundary, and an open run
at the end of a window is handed to that window's decoder (its anchor lies
inside it) and not emitted again later.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import ctc
from .encoder import init_stream, latents_for, stream_step
from .unitdec import StreamingUnitGenerator

INPUT_CHUNK = "INPUT_CHUNK"
TOKEN_FINALIZED = "TOKEN_FINALIZED"
UNIT_CHUNK = "UNIT_CHUNK"
DONE = "DONE"


class StreamError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    chunk_frames: int = 8
    window_frames: int | None = None
    frame_period_ms: float = 20.0

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise StreamError("chunk_frames must be >= 1")
        if self.window_frames is not None and self.window_frames < self.chunk_frames:
            raise StreamError(f"window ({self.window_frames}) must be at least one chunk ({self.chunk_frames})")
        if self.frame_period_ms <= 0:
            raise StreamError("frame_period_ms must be positive")


@dataclass
class StreamEvent:
    kind: str
    payload: object
    wall_clock_ns: int
    logical_frame: int

    def summary(self) -> str:
        p = self.payload
        if isinstance(p, (list, tuple)):
            return " ".join(map(str, p))
        return "" if p is None else str(p)


class EventLog:
    """Single-clock event recorder; ``clock`` returns monotonic nanoseconds."""

    def __init__(self, clock: Callable[[], int] = time.monotonic_ns):
        self.clock = clock
        self.events: list[StreamEvent] = []

    def emit(self, kind: str, frame: int, payload=None) -> StreamEvent:
        ev = StreamEvent(kind, payload, self.clock(), int(frame))
        if self.events and ev.wall_clock_ns < self.events[-1].wall_clock_ns:
            raise StreamError("clock went backwards")
        self.events.append(ev)
        return ev

    def first(self, kind: str) -> StreamEvent | None:
        return next((e for e in self.events if e.kind == kind), None)

    def of(self, kind: str) -> list[StreamEvent]:
        return [e for e in self.events if e.kind == kind]

    def write_trace(self, path):
        lines = [f"{e.wall_clock_ns}\t{e.kind}\t{e.logical_frame}\t{e.summary()}" for e in self.events]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class StreamReport:
    rtf_encode: float | None
    rtf_decode: float | None
    rtf_total: float | None
    fcl_ms: float
    total_frames: int
    encode_s: float
    decode_s: float
    breakdown: dict = field(default_factory=dict)

    def to_text(self) -> str:
        from .evalkit import fmt
        keys = {"rtf_encode": self.rtf_encode, "rtf_decode": self.rtf_decode, "rtf_total": self.rtf_total,
                "fcl_ms": self.fcl_ms, "total_frames": self.total_frames, "encode_s": self.encode_s,
                "decode_s": self.decode_s}
        keys.update({f"stage.{k}": v for k, v in self.breakdown.items()})
        return "".join(f"{k}={fmt(keys[k])}\n" for k in sorted(keys))


def measure(log: EventLog, total_frames: int, encode_s: float, decode_s: float, cfg: StreamConfig,
            output_kind: str = UNIT_CHUNK) -> StreamReport:
    """RTF from compute-only stage times; FCL = first output minus first input, as logged."""
    t_audio = total_frames * cfg.frame_period_ms / 1000.0
    first_in, first_out = log.first(INPUT_CHUNK), log.first(output_kind)
    if first_in is None or first_out is None:
        fcl = float("inf")
    else:
        fcl = (first_out.wall_clock_ns - first_in.wall_clock_ns) / 1e6

    def rtf(s):
        return s / t_audio if t_audio > 0 else None

    return StreamReport(rtf(encode_s), rtf(decode_s), rtf(encode_s + decode_s), fcl, total_frames,
                        encode_s, decode_s, {"encode_s": encode_s, "decode_s": decode_s})


def chunks_of(frames: np.ndarray, size: int) -> Iterable[np.ndarray]:
    for a in range(0, len(frames), size):
        yield frames[a:a + size]


@dataclass
class AlignedToken:
    token: int
    index: int
    z: np.ndarray
    anchor: int


@dataclass
class StreamResult:
    tokens: list[AlignedToken]
    units: list[int]
    chunks: list[list[int]]
    report: StreamReport
    log: EventLog
    truncated: bool = False

    @property
    def text(self) -> list[int]:
        return [t.token for t in self.tokens]

    @property
    def indices(self) -> np.ndarray:
        return np.asarray([t.index for t in self.tokens], dtype=np.int64)

    @property
    def z(self) -> np.ndarray:
        if not self.tokens:
            return np.zeros((0, 0), np.float32)
        return np.stack([t.z for t in self.tokens])


class _Timer:
    def __init__(self):
        self.total = 0.0

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.total += time.perf_counter() - self.t0


def _quantized(model, finalized) -> list[AlignedToken]:
    if not finalized:
        return []
    ql = model.fsq.quantize(np.stack([z for _, _, z in finalized]))
    return [AlignedToken(t, int(q), zr, a) for (t, a, _), q, zr in zip(finalized, ql.indices, ql.z)]


def run_stream(model, frames, cfg: StreamConfig = StreamConfig(), decode: bool = True,
               log: EventLog | None = None, before_output: Callable[[], None] | None = None) -> StreamResult:
    """Streamed encode (and, with ``decode``, unit generation) over a frame matrix or chunk iterable.

    ``before_output`` runs right before each unit chunk is logged; tests use it
    to inject a known delay.
    """
    log = log or EventLog()
    enc_t, dec_t = _Timer(), _Timer()
    source = chunks_of(np.asarray(frames, np.float32), cfg.chunk_frames) \
        if isinstance(frames, np.ndarray) else frames
    W = cfg.window_frames
    tokens: list[AlignedToken] = []
    units: list[int] = []
    chunks: list[list[int]] = []
    truncated = False
    ctc_dec = ctc.StreamingCtcDecoder(model.cfg.encoder.blank)
    pos = 0
    win_start = 0
    state = init_stream(model.enc, 0, ctc_dec)
    gen = StreamingUnitGenerator(model.dec) if decode else None
    handed_over: set[int] = set()

    def emit_tokens(new: list[AlignedToken]):
        nonlocal truncated
        for tok in new:
            tokens.append(tok)
            log.emit(TOKEN_FINALIZED, pos, (tok.token, tok.index, tok.anchor))
            if gen is not None:
                with dec_t:
                    out = gen.push(tok.token, tok.z)
                for c in out:
                    emit_units(c)

    def emit_units(c):
        if before_output is not None:
            before_output()
        units.extend(c)
        chunks.append(c)
        log.emit(UNIT_CHUNK, pos, c)

    def close_window():
        """Hand the open run to the current window and finish its decoder."""
        nonlocal gen, truncated
        p = ctc_dec.pending()
        if p is not None and p[1] not in handed_over and p[1] >= win_start:
            with enc_t:
                new = _quantized(model, latents_for(model.enc, state, [p]))
            handed_over.add(p[1])
            emit_tokens(new)
        if gen is not None:
            before = len(gen.out.chunks)
            with dec_t:
                res = gen.finish()
            for c in res.chunks[before:]:
                emit_units(c)
            truncated = truncated or res.truncated

    try:
        for chunk in source:
            chunk = np.asarray(chunk, np.float32)
            start = 0
            while start < len(chunk):
                take = len(chunk) - start
                if W is not None:
                    take = min(take, win_start + W - pos)
                piece = chunk[start:start + take]
                log.emit(INPUT_CHUNK, pos, len(piece))
                with enc_t:
                    fin = stream_step(model.enc, state, piece)
                    fin = [f for f in fin if f[1] not in handed_over]
                    new = _quantized(model, fin)
                pos += len(piece)
                start += take
                emit_tokens(new)
                if W is not None and pos - win_start >= W:
                    close_window()
                    win_start = pos
                    state = init_stream(model.enc, win_start, ctc_dec, state.prev_token)
                    gen = StreamingUnitGenerator(model.dec) if decode else None
    except StreamError:
        raise
    except Exception as exc:
        raise StreamError(f"stream failed at frame {pos}: {exc}") from exc
    if pos > win_start or W is None:
        p = ctc_dec.pending()
        if p is not None and p[1] not in handed_over:
            with enc_t:
                new = _quantized(model, latents_for(model.enc, state, ctc_dec.flush()))
            emit_tokens(new)
        if gen is not None:
            before = len(gen.out.chunks)
            with dec_t:
                res = gen.finish()
            for c in res.chunks[before:]:
                emit_units(c)
            truncated = truncated or res.truncated
    log.emit(DONE, pos)
    kind = UNIT_CHUNK if decode else TOKEN_FINALIZED
    report = measure(log, pos, enc_t.total, dec_t.total, cfg, kind)
    return StreamResult(tokens, units, chunks, report, log, truncated)


def stream_encode(model, frames, cfg: StreamConfig = StreamConfig(), log: EventLog | None = None) -> StreamResult:
    return run_stream(model, frames, cfg, decode=False, log=log)


def stream_decode(model, aligned: Iterable, cfg: StreamConfig = StreamConfig(),
                  log: EventLog | None = None) -> StreamResult:
    """Units from an ordered source of ``(token, fsq index)`` pairs."""
    log = log or EventLog()
    gen = StreamingUnitGenerator(model.dec)
    dec_t = _Timer()
    toks, n = [], 0
    for tok, q in aligned:
        log.emit(INPUT_CHUNK if n == 0 else TOKEN_FINALIZED, n, (tok, q))
        with dec_t:
            z = model.latents_from_indices([int(q)])[0]
            out = gen.push(int(tok), z)
        toks.append(AlignedToken(int(tok), int(q), z, -1))
        for c in out:
            log.emit(UNIT_CHUNK, n, c)
        n += 1
    before = len(gen.out.chunks)
    with dec_t:
        res = gen.finish()
    for c in res.chunks[before:]:
        log.emit(UNIT_CHUNK, n, c)
    log.emit(DONE, n)
    report = measure(log, 0, 0.0, dec_t.total, cfg)
    return StreamResult(toks, list(res.units), list(res.chunks), report, log, res.truncated)


@dataclass
class LongformResult:
    result: StreamResult
    delta_len: float


def stream_longform(model, frames, ref_units, cfg: StreamConfig) -> LongformResult:
    """Windowed reconstruction of a long input plus its length difference (percent)."""
    from .evalkit import delta_len
    if cfg.window_frames is None:
        raise StreamError("longform streaming needs window_frames")
    res = run_stream(model, frames, cfg)
    return LongformResult(res, delta_len(ref_units, res.units))

"""Reconstruction metrics and report assembly.

Reconstructed units are turned back into text by collapsing runs of equal
unit ids, mapping each run to its character and dropping silence; the run
lengths give per-character durations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .fsq import codebook_utilization
from .numcore import ContractError
from .synthcorpus import CorpusConfig, Utterance
from .unitdec import decoder_loss, interleave

__all__ = ["token_error_rate", "edit_distance", "align", "duration_consistency", "aligned_durations",
           "delta_len", "codebook_utilization", "units_to_runs", "EvalReport", "evaluate", "fmt"]


def fmt(x) -> str:
    """Six significant digits; absent values print as ``absent``."""
    if x is None:
        return "absent"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{float(x):.6g}"


def _table(ref, hyp) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    D = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev, row, r = D[-1], [i], ref[i - 1]
        for j in range(1, m + 1):
            row.append(min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (r != hyp[j - 1])))
        D.append(row)
    return D


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        row = [i]
        for j, h in enumerate(hyp, 1):
            row.append(min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = row
    return prev[-1]


def token_error_rate(ref, hyp) -> float:
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ContractError("token error rate needs a nonempty reference")
    return edit_distance(ref, hyp) / len(ref)


def align(ref, hyp) -> list[tuple[int | None, int | None]]:
    """Minimum-edit alignment as (ref index, hyp index) pairs; None marks a gap.

    Ties prefer diagonal moves so equal-length inputs pair up position by position.
    """
    ref, hyp = list(ref), list(hyp)
    D = _table(ref, hyp)
    i, j, out = len(ref), len(hyp), []
    while i or j:
        if i and j and D[i][j] == D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            out.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and D[i][j] == D[i - 1][j] + 1:
            out.append((i - 1, None))
            i -= 1
        else:
            out.append((None, j - 1))
            j -= 1
    return out[::-1]


def aligned_durations(ref_chars, ref_durs, hyp_chars, hyp_durs) -> list[int | None]:
    """Hypothesis duration paired with each reference character (None when unmatched)."""
    out: list[int | None] = [None] * len(ref_chars)
    for i, j in align(ref_chars, hyp_chars):
        if i is not None and j is not None and ref_chars[i] == hyp_chars[j]:
            out[i] = int(hyp_durs[j])
    return out


def duration_consistency(ref_durations, hyp_durations, tol_frames: int = 2) -> float:
    """Fraction of reference characters whose paired duration is within ``tol_frames``."""
    ref_durations = list(ref_durations)
    if not ref_durations:
        return 1.0
    ok = sum(h is not None and abs(int(h) - int(r)) <= tol_frames for r, h in zip(ref_durations, hyp_durations))
    return ok / len(ref_durations)


def delta_len(ref, hyp) -> float:
    if len(ref) == 0:
        raise ContractError("delta_len needs a nonempty reference")
    return abs(len(hyp) - len(ref)) / len(ref) * 100.0


def units_to_runs(units, cfg: CorpusConfig) -> tuple[list[int], list[int]]:
    """Characters and durations of the non-silence unit runs."""
    chars, durs = [], []
    prev = None
    for u in units:
        u = int(u)
        if u != prev:
            if u != cfg.silence_unit:
                chars.append(u // cfg.unit_variants)
                durs.append(0)
        if u != cfg.silence_unit:
            durs[-1] += 1
        prev = u
    return chars, durs


def frame_accuracy(ref, hyp) -> float:
    ref, hyp = np.asarray(ref), np.asarray(hyp)
    n = min(len(ref), len(hyp))
    return float((ref[:n] == hyp[:n]).sum()) / max(len(ref), 1)


# -- reports ----------------------------------------------------------------------

@dataclass
class UtteranceResult:
    id: str
    ter: float
    asr_ter: float
    duration_consistency: float
    delta_len: float
    frame_accuracy: float
    unit_accuracy: float
    n_ref: int
    n_hyp_units: int
    truncated: bool


@dataclass
class EvalReport:
    mode: str
    ter: float
    asr_ter: float
    duration_consistency: float
    delta_len_mean: float
    delta_len_std: float
    codebook_utilization: float | None
    unit_accuracy: float
    frame_accuracy: float
    truncated: int
    utterances: list[UtteranceResult] = field(default_factory=list)
    rtf_encode: float | None = None
    rtf_decode: float | None = None
    rtf_total: float | None = None
    fcl_ms: float | None = None
    utmos: None = None
    speaker_similarity: None = None

    SUMMARY_KEYS = ("mode", "ter", "asr_ter", "duration_consistency", "delta_len_mean", "delta_len_std",
                    "codebook_utilization", "unit_accuracy", "frame_accuracy", "truncated",
                    "rtf_encode", "rtf_decode", "rtf_total", "fcl_ms", "utmos", "speaker_similarity")

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.SUMMARY_KEYS):
            v = getattr(self, k)
            lines.append(f"{k}={v if isinstance(v, str) else fmt(v)}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        cols = ("id", "ter", "asr_ter", "duration_consistency", "delta_len", "frame_accuracy",
                "unit_accuracy", "n_ref", "n_hyp_units", "truncated")
        out = ["\t".join(cols)]
        for u in self.utterances:
            out.append("\t".join(u.id if c == "id" else fmt(int(getattr(u, c)) if c == "truncated"
                                                              else getattr(u, c)) for c in cols))
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        head = ("Mode", "WER(TER)", "ASR-TER", "DurCons", "dLen(%)", "Utilization", "UnitAcc", "Enc.RTF",
                "Dec.RTF", "FCL(ms)", "UTMOS", "SpkSim")
        vals = (self.mode, self.ter, self.asr_ter, self.duration_consistency, self.delta_len_mean,
                self.codebook_utilization, self.unit_accuracy, self.rtf_encode, self.rtf_decode,
                self.fcl_ms, self.utmos, self.speaker_similarity)
        return ",".join(head) + "\n" + ",".join(v if isinstance(v, str) else fmt(v) for v in vals) + "\n"


def evaluate(model, utts: list[Utterance], cfg: CorpusConfig, mode: str = "ctc", bypass: bool = False,
             tol_frames: int = 2) -> EvalReport:
    """Encode, quantize and decode every utterance; score the reconstruction.

    ``mode`` is ``ctc`` (built-in recognizer) or ``ext`` (ground-truth text
    in place of an external recognizer).  ``bypass`` skips the quantizer.
    """
    if mode not in ("ctc", "ext"):
        raise ContractError(f"unknown transcript mode {mode!r}")
    results, all_q = [], []
    for u in utts:
        rec = model.encode(u.frames, u.transcript if mode == "ext" else None, bypass=bypass)
        gen = model.decode(rec)
        if rec.indices is not None:
            all_q.append(np.asarray(rec.indices))
        hyp_chars, hyp_durs = units_to_runs(gen.units, cfg)
        ref_units = np.asarray(u.units)
        seq = interleave(rec.tokens, rec.z, ref_units, model.cfg.decoder.interleave)
        with nc.no_grad(), nc.deterministic_kernels():
            _, pos, tgt, logits = decoder_loss(model.dec, [seq])
        unit_pos = tgt < model.cfg.decoder.unit_vocab
        ua = float((logits.data[pos[unit_pos]].argmax(1) == tgt[unit_pos]).mean()) if unit_pos.any() else 1.0
        results.append(UtteranceResult(
            u.id, token_error_rate(u.transcript, hyp_chars), token_error_rate(u.transcript, rec.tokens),
            duration_consistency(u.char_durations,
                                 aligned_durations(u.transcript, u.char_durations, hyp_chars, hyp_durs),
                                 tol_frames),
            delta_len(ref_units, gen.units), frame_accuracy(ref_units, gen.units), ua,
            len(u.transcript), len(gen.units), gen.truncated))
    return summarize(results, mode, all_q, model.cfg.fsq.levels)


def summarize(results: list[UtteranceResult], mode: str, q_lists, levels) -> EvalReport:
    """Corpus-level fold in utterance-id order; rates are reference-length weighted."""
    results = sorted(results, key=lambda r: r.id)
    if not results:
        raise ContractError("nothing to evaluate")
    n_ref = np.array([r.n_ref for r in results], dtype=np.float64)
    w = n_ref / n_ref.sum()
    dl = np.array([r.delta_len for r in results])
    q = np.concatenate(q_lists) if q_lists else np.zeros(0, np.int64)
    return EvalReport(
        mode=mode,
        ter=float((np.array([r.ter for r in results]) * w).sum()),
        asr_ter=float((np.array([r.asr_ter for r in results]) * w).sum()),
        duration_consistency=float((np.array([r.duration_consistency for r in results]) * w).sum()),
        delta_len_mean=float(dl.mean()),
        delta_len_std=float(dl.std()),
        codebook_utilization=codebook_utilization(q, levels) if q.size else None,
        unit_accuracy=float(np.mean([r.unit_accuracy for r in results])),
        frame_accuracy=float(np.mean([r.frame_accuracy for r in results])),
        truncated=int(sum(r.truncated for r in results)),
        utterances=results,
    )

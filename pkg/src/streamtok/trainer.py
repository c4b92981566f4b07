"""Staged training: encoder pretraining, oracle-text stage, full-tokenizer stage.

Stage 0 trains the causal encoder and CTC head on the CTC loss.  After it the
encoder is frozen, so its hidden states are computed once per example.
Stage 1 keeps training the CTC head while the aggregator and decoder learn
from ground-truth text and start frames with the quantizer bypassed.
Stage 2 feeds greedy CTC text, CTC anchors and FSQ codes to the decoder and
adds the CTC loss as an auxiliary term.

Batches pack several examples along the time axis; segment ids keep
attention and losses inside each example, so no padding is needed.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ctc
from . import numcore as nc
from .model import ModelConfig, Tokenizer
from .numcore import Tensor
from .synthcorpus import SILENCE_GAP, CorpusConfig, Utterance, units_for
from .unitdec import decoder_loss, interleave

CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1
STAGES = (0, 1, 2)
ABLATIONS = ("none", "no-bistage", "no-joint")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    steps_stage0: int = 400
    steps_stage1: int = 1200
    steps_stage2: int = 600
    lr_encoder: float = 2e-3
    lr_ctc_head: float = 1e-3
    lr_other: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    aux_ctc_weight: float = 1.0
    freeze_ctc_stage2: int = 0
    grad_clip: float = 1.0
    concat_fraction: float = 0.5
    crop_fraction: float = 1.0
    max_join: int = 7
    log_every: int = 1

    def steps(self, stage: int) -> int:
        return (self.steps_stage0, self.steps_stage1, self.steps_stage2)[stage]

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"train.{f.name}={' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        return sorted(out)

    @classmethod
    def from_lines(cls, lines) -> "TrainConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for line in lines:
            key, _, val = line.strip().partition("=")
            if not key.startswith("train."):
                continue
            name = key[len("train."):]
            if name not in known:
                raise CheckpointError(f"unknown key {key}")
            typ = str(known[name].type)
            if "tuple" in typ:
                kw[name] = tuple(float(x) for x in val.split())
            elif "float" in typ:
                kw[name] = float(val)
            else:
                kw[name] = int(val)
        return cls(**kw)


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` then cosine decay to 0.1 * peak at ``total``."""
    if warmup >= total:
        raise TrainingError(f"warmup ({warmup}) must be shorter than the run ({total})")
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return peak * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


class AdamW:
    """Adam with decoupled weight decay; parameters come in named groups with their own lr."""

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]], betas=(0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def params(self):
        for gname, (params, peak) in self.groups.items():
            for name, p in params.items():
                yield gname, name, p, peak

    def step(self, scale_lr, clip: float = 0.0):
        """``scale_lr(peak)`` maps a group's peak lr to the current lr."""
        self.t += 1
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for _, name, p, _ in self.params()}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        k = clip / norm if clip and norm > clip else 1.0
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for _, name, p, peak in self.params():
            g = grads[name] * k
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            lr = scale_lr(peak)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data = (p.data - lr * upd).astype(np.float32)
        return norm


# -- examples and batches -------------------------------------------------------

@dataclass
class Example:
    id: str
    frames: np.ndarray
    transcript: list[int]
    units: np.ndarray
    starts: list[int]
    durations: list[int]


def example_of(u: Utterance) -> Example:
    return Example(u.id, u.frames, list(u.transcript), np.asarray(u.units), list(u.char_starts),
                   list(u.char_durations))


def joined_example(parts: list[Utterance], cfg: CorpusConfig) -> Example:
    """Concatenate utterances with silence; units count character occurrences over the whole item."""
    D = parts[0].frames.shape[1]
    frames, units, text, starts, durs = [], [], [], [], []
    seen: dict[int, int] = {}
    off = 0
    for j, u in enumerate(parts):
        if j:
            frames.append(np.zeros((SILENCE_GAP, D), np.float32))
            units.append(np.full(SILENCE_GAP, cfg.silence_unit, np.int64))
            off += SILENCE_GAP
        frames.append(u.frames)
        for c, d in zip(u.transcript, u.char_durations):
            v = seen.get(c, 0)
            seen[c] = v + 1
            units.append(np.full(d, c * cfg.unit_variants + v % cfg.unit_variants, np.int64))
        text.extend(u.transcript)
        durs.extend(u.char_durations)
        starts.extend(s + off for s in u.char_starts)
        off += u.num_frames
    return Example("+".join(p.id for p in parts), np.concatenate(frames), text,
                   np.concatenate(units), starts, durs)


def cropped_example(u: Utterance, a: int, b: int, cfg: CorpusConfig) -> Example:
    """Characters ``a..b-1`` of an utterance with their frames; occurrences restart at the crop."""
    f0 = u.char_starts[a]
    f1 = u.char_starts[b - 1] + u.char_durations[b - 1]
    text, durs = list(u.transcript[a:b]), list(u.char_durations[a:b])
    return Example(f"{u.id}[{a}:{b}]", u.frames[f0:f1], text, units_for(text, durs, cfg.unit_variants),
                   [s - f0 for s in u.char_starts[a:b]], durs)


def make_examples(utts: list[Utterance], cfg: CorpusConfig, concat_fraction: float, seed: int,
                  crop_fraction: float = 0.0, max_join: int = 3) -> list[Example]:
    """Utterances plus joined (concatenated) and cropped variants, deterministically from ``seed``."""
    rng = np.random.default_rng([seed, 99])
    out = [example_of(u) for u in utts]
    for _ in range(int(round(concat_fraction * len(utts)))):
        k = int(rng.integers(2, max_join + 1))
        pick = rng.choice(len(utts), size=min(k, len(utts)), replace=False)
        if len(pick) >= 2:
            out.append(joined_example([utts[i] for i in pick], cfg))
    crop_rng = np.random.default_rng([seed, 98])
    for _ in range(int(round(crop_fraction * len(utts)))):
        u = utts[int(crop_rng.integers(len(utts)))]
        n = len(u.transcript)
        if n < 3:
            continue
        a = int(crop_rng.integers(1, n - 1))
        b = int(crop_rng.integers(a + 2, n + 1)) if a + 2 <= n else n
        out.append(cropped_example(u, a, b, cfg))
    return out


@dataclass
class Packed:
    frames: np.ndarray
    seg: np.ndarray
    segments: list[tuple[int, int]]
    examples: list[Example]


def pack(examples: list[Example]) -> Packed:
    segs, off = [], 0
    for e in examples:
        segs.append((off, off + len(e.frames)))
        off += len(e.frames)
    seg = np.concatenate([np.full(len(e.frames), i) for i, e in enumerate(examples)])
    return Packed(np.concatenate([e.frames for e in examples]).astype(np.float32), seg, segs, examples)


# -- losses ---------------------------------------------------------------------

def stage0_loss(model: Tokenizer, batch: Packed):
    hid = model.enc.asr_encode(batch.frames, batch.seg)
    logp = model.enc.ctc_head(hid[-1])
    loss, _ = ctc.ctc_loss_batch(logp, batch.segments, [e.transcript for e in batch.examples])
    return loss


def frozen_hiddens(model: Tokenizer, ex: Example) -> tuple[np.ndarray, np.ndarray]:
    with nc.no_grad():
        hid = model.enc.asr_encode(ex.frames)
    return hid[model.cfg.encoder.shallow_layer - 1].data, hid[-1].data


def tokenizer_loss(model: Tokenizer, batch: Packed, hiddens: list, stage: int, bypass: bool | None = None):
    """(CTC loss, decoder loss, stats) for stages 1 and 2 on frozen encoder states."""
    enc = model.enc
    hs = nc.tensor(np.concatenate([h[0] for h in hiddens]))
    hl = nc.tensor(np.concatenate([h[1] for h in hiddens]))
    logp = enc.ctc_head(hl)
    l_ctc, _ = ctc.ctc_loss_batch(logp, batch.segments, [e.transcript for e in batch.examples])
    toks, anchors, tseg, seqs = [], [], [], []
    for i, ((a, b), e) in enumerate(zip(batch.segments, batch.examples)):
        if stage == 1:
            s, fr = e.transcript, e.starts
        else:
            s, fr = ctc.greedy_decode(logp.data[a:b], enc.cfg.blank)
        toks.extend(s)
        anchors.extend(a + f for f in fr)
        tseg.extend([i] * len(s))
        seqs.append(interleave(s, np.zeros((len(s), 1), np.float32), e.units, model.cfg.decoder.interleave))
    k, v = enc.agg.keys_values(hs, hl, batch.seg)
    if toks:
        z, _ = enc.agg(toks, anchors, k, v, np.asarray(tseg), batch.seg)
        zq, q = model.fsq(z, bypass=(stage == 1) if bypass is None else bypass)
    else:
        zq, q = None, None
    l_ce, pos, tgt, logits = decoder_loss(model.dec, seqs, zq)
    acc = float((logits.data[pos].argmax(1) == tgt).mean())
    return l_ctc, l_ce, {"acc": acc, "q": q}


# -- stage driver -----------------------------------------------------------------

@dataclass
class TrainState:
    stage: int
    step: int
    rng: np.random.Generator
    opt: AdamW
    log: list = field(default_factory=list)


def param_groups(model: Tokenizer, stage: int, tcfg: TrainConfig) -> dict:
    head = {f"enc.ctc.{k}": v for k, v in model.enc.ctc.named_parameters().items()}
    if stage == 0:
        enc = {f"enc.asr.{k}": v for k, v in model.enc.asr.named_parameters().items()}
        return {"encoder": (enc, tcfg.lr_encoder), "ctc_head": (head, tcfg.lr_ctc_head)}
    other = {f"enc.agg.{k}": v for k, v in model.enc.agg.named_parameters().items()}
    other.update({f"fsq.{k}": v for k, v in model.fsq.named_parameters().items()})
    other.update({f"dec.{k}": v for k, v in model.dec.named_parameters().items()})
    groups = {"other": (other, tcfg.lr_other)}
    if not (stage == 2 and tcfg.freeze_ctc_stage2):
        groups["ctc_head"] = (head, tcfg.lr_ctc_head)
    return groups


def new_state(model: Tokenizer, stage: int, tcfg: TrainConfig) -> TrainState:
    opt = AdamW(param_groups(model, stage, tcfg), tcfg.betas, tcfg.weight_decay)
    return TrainState(stage, 0, np.random.default_rng([tcfg.seed, stage]), opt)


def train_stage(model: Tokenizer, examples: list[Example], tcfg: TrainConfig, stage: int,
                state: TrainState | None = None, log_path=None, until: int | None = None,
                hidden_cache: list | None = None) -> TrainState:
    """Run (or resume) one stage; returns the state after the last step."""
    if stage not in STAGES:
        raise TrainingError(f"unknown stage {stage}")
    state = state or new_state(model, stage, tcfg)
    total = tcfg.steps(stage)
    until = total if until is None else min(until, total)
    if stage > 0 and hidden_cache is None:
        hidden_cache = [frozen_hiddens(model, e) for e in examples]
    log_file = open(log_path, "a") if log_path else None
    try:
        while state.step < until:
            idx = state.rng.choice(len(examples), size=min(tcfg.batch_size, len(examples)), replace=False)
            batch = pack([examples[i] for i in idx])
            model.zero_grad()
            if stage == 0:
                l_ctc, l_ce = stage0_loss(model, batch), None
                loss = l_ctc
            else:
                l_ctc, l_ce, _ = tokenizer_loss(model, batch, [hidden_cache[i] for i in idx], stage)
                w = 1.0 if stage == 1 else tcfg.aux_ctc_weight
                loss = nc.add(l_ce, nc.scale(l_ctc, w)) if w else l_ce
            if not np.isfinite(loss.item()):
                raise TrainingError(f"stage {stage}: loss is not finite at step {state.step}")
            nc.backward(loss)
            step = state.step
            state.opt.step(lambda peak: lr_at(step, peak, tcfg.warmup_steps, total), tcfg.grad_clip)
            lr = lr_at(step, tcfg.lr_other if stage else tcfg.lr_encoder, tcfg.warmup_steps, total)
            row = (step, stage, l_ctc.item(), l_ce.item() if l_ce is not None else float("nan"), lr)
            state.log.append(row)
            if log_file and step % tcfg.log_every == 0:
                log_file.write(format_log_row(row) + "\n")
            state.step += 1
    finally:
        if log_file:
            log_file.close()
    return state


def format_log_row(row) -> str:
    step, stage, lc, le, lr = row
    return f"{step}\t{stage}\t{lc:.6g}\t{le:.6g}\t{lr:.6g}"


def run_training(train_utts: list[Utterance], corpus_cfg: CorpusConfig, model_cfg: ModelConfig,
                 tcfg: TrainConfig, ablation: str = "none", stages=(0, 1, 2), out_dir=None,
                 start: Tokenizer | None = None, verbose: bool = False) -> tuple[Tokenizer, dict]:
    """Run the requested stages in order, honoring the ablation switches.

    ``no-bistage`` skips stage 1 (stage 2 starts from stage-0 weights);
    ``no-joint`` skips stage 2.  Returns the final model and the per-stage
    wall-clock seconds.  Checkpoints go to ``out_dir/ckpt-stage{k}.tsck``.
    """
    if ablation not in ABLATIONS:
        raise TrainingError(f"unknown ablation {ablation!r}")
    model = start or Tokenizer(model_cfg)
    examples = make_examples(train_utts, corpus_cfg, tcfg.concat_fraction, tcfg.seed, tcfg.crop_fraction,
                             tcfg.max_join)
    timings = {}
    cache = None
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        if (ablation == "no-bistage" and stage == 1) or (ablation == "no-joint" and stage == 2):
            continue
        t0 = time.perf_counter()
        if stage > 0 and cache is None:
            cache = [frozen_hiddens(model, e) for e in examples]
        log = out / "train.log" if out else None
        st = train_stage(model, examples, tcfg, stage, log_path=log, hidden_cache=cache)
        timings[stage] = time.perf_counter() - t0
        if verbose:
            tail = st.log[-50:]
            print(f"stage {stage}: {timings[stage]:.1f}s ctc={np.mean([r[2] for r in tail]):.4f} "
                  f"ce={np.mean([r[3] for r in tail]):.4f}")
        if out:
            save_checkpoint(out / f"ckpt-stage{stage}.tsck", model, tcfg, st)
    return model, timings


# -- checkpoints -------------------------------------------------------------------

def _config_lines(model: Tokenizer, tcfg: TrainConfig, state: TrainState | None) -> list[str]:
    lines = model.cfg.to_lines() + tcfg.to_lines()
    if state is not None:
        lines.append(f"ckpt.stage={state.stage}")
        lines.append(f"ckpt.step={state.step}")
        lines.append(f"ckpt.opt_t={state.opt.t}")
        bg = state.rng.bit_generator.state
        lines.append(f"rng.state={bg['state']['state']}")
        lines.append(f"rng.inc={bg['state']['inc']}")
        lines.append(f"rng.has_uint32={bg['has_uint32']}")
        lines.append(f"rng.uinteger={bg['uinteger']}")
    return sorted(lines)


def state_tensors(model: Tokenizer, state: TrainState | None) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in model.named_parameters().items()}
    if state is not None:
        for k, m in state.opt.m.items():
            out[f"opt.m.{k}"] = m
        for k, v in state.opt.v.items():
            out[f"opt.v.{k}"] = v
    return out


def save_checkpoint(path, model: Tokenizer, tcfg: TrainConfig, state: TrainState | None = None):
    blob = "\n".join(_config_lines(model, tcfg, state)).encode()
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in sorted(state_tensors(model, state).items()):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    lines: list[str]
    tensors: dict[str, np.ndarray]

    def value(self, key: str, default=None):
        for line in self.lines:
            k, _, v = line.partition("=")
            if k == key:
                return v
        return default


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (ver,) = struct.unpack_from("<H", data, 4)
    if ver != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {ver}")
    (n,) = struct.unpack_from("<I", data, 6)
    lines = data[10:10 + n].decode().split("\n") if n else []
    pos = 10 + n
    tensors = {}
    try:
        while pos < len(data):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated tensor table") from exc
    return Checkpoint(lines, tensors)


def load_model(path) -> Tokenizer:
    ck = read_checkpoint(path)
    model = Tokenizer(ModelConfig.from_lines(ck.lines))
    params = model.named_parameters()
    for name, p in params.items():
        if name not in ck.tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if ck.tensors[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = ck.tensors[name].copy()
    return model


def load_state(path, model: Tokenizer, tcfg: TrainConfig) -> TrainState:
    """Optimizer/rng state stored with a checkpoint, for resuming a stage."""
    ck = read_checkpoint(path)
    stage = int(ck.value("ckpt.stage"))
    state = new_state(model, stage, tcfg)
    state.step = int(ck.value("ckpt.step"))
    state.opt.t = int(ck.value("ckpt.opt_t"))
    for k, arr in ck.tensors.items():
        if k.startswith("opt.m."):
            state.opt.m[k[6:]] = arr.copy()
        elif k.startswith("opt.v."):
            state.opt.v[k[6:]] = arr.copy()
    bg = state.rng.bit_generator.state
    bg["state"] = {"state": int(ck.value("rng.state")), "inc": int(ck.value("rng.inc"))}
    bg["has_uint32"] = int(ck.value("rng.has_uint32", 0))
    bg["uinteger"] = int(ck.value("rng.uinteger", 0))
    state.rng.bit_generator.state = bg
    return state


def weight_digest(params: dict[str, Tensor]) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def with_steps(tcfg: TrainConfig, **kw) -> TrainConfig:
    return replace(tcfg, **kw)

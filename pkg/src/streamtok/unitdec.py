"""Autoregressive unit decoder over an N:M interleaved token/unit sequence.

Slots are BOS, then groups of N aligned slots (text token + quantized
latent, or TEXT_DONE once the transcript is used up) each followed by up to M
unit slots, then EOS right after the last unit.  The decoder predicts the
next unit (or EOS) at every slot whose successor is a unit or EOS.

Besides its own embedding each slot carries a few features computed from the
units decoded so far: the last unit, the length of its run, and the index of
the character run in progress.  Attention gets two learned biases, one over
slot distance and one over (key token index - query character index), which
lets a head lock onto "the token being spoken" and "the next token".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .nn import Embedding, LayerNorm, Linear, MLP, Module, RelativeBias, attend_blocks, split_cols
from .numcore import ContractError, Tensor

BOS, ALIGNED, TEXT_DONE, UNIT, EOS = range(5)
KIND_NAMES = ("BOS", "ALIGNED", "TEXT_DONE", "UNIT", "EOS")


@dataclass(frozen=True)
class InterleaveConfig:
    N: int = 2
    M: int = 5

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError(f"N and M must be >= 1, got {self.N}:{self.M}")


@dataclass(frozen=True)
class Slot:
    kind: int
    value: int = -1

    def __str__(self):
        if self.kind == ALIGNED:
            return f"t{self.value}"
        if self.kind == UNIT:
            return f"u{self.value}"
        return KIND_NAMES[self.kind]


@dataclass
class InterleavedSequence:
    slots: list[Slot]
    z: np.ndarray

    def __len__(self):
        return len(self.slots)

    def __str__(self):
        return " ".join(map(str, self.slots))


def num_groups(n_tokens: int, n_units: int, cfg: InterleaveConfig) -> int:
    return max(1, -(-n_tokens // cfg.N), -(-n_units // cfg.M))


def interleave(s, z, y, cfg: InterleaveConfig) -> InterleavedSequence:
    s = [int(t) for t in s]
    y = [int(u) for u in y]
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 2:
        z = z.reshape(len(s), -1) if z.size else np.zeros((0, 0), np.float32)
    if z.shape[0] != len(s):
        raise ContractError(f"{len(s)} text tokens but {z.shape[0]} latent rows")
    slots = [Slot(BOS)]
    for g in range(num_groups(len(s), len(y), cfg)):
        for i in range(g * cfg.N, (g + 1) * cfg.N):
            slots.append(Slot(ALIGNED, s[i]) if i < len(s) else Slot(TEXT_DONE))
        slots.extend(Slot(UNIT, u) for u in y[g * cfg.M:(g + 1) * cfg.M])
    slots.append(Slot(EOS))
    return InterleavedSequence(slots, z)


def parse(seq: InterleavedSequence, cfg: InterleaveConfig):
    """Inverse of ``interleave``: ``(s, z, y)``; malformed patterns raise."""
    slots = seq.slots
    if len(slots) < 2 or slots[0].kind != BOS or slots[-1].kind != EOS:
        raise ContractError("sequence must start with BOS and end with EOS")
    s, y = [], []
    pos, done = 1, False
    while pos < len(slots) - 1:
        for _ in range(cfg.N):
            if pos >= len(slots) - 1:
                raise ContractError(f"truncated aligned group at slot {pos}")
            sl = slots[pos]
            if sl.kind == ALIGNED and not done:
                s.append(sl.value)
            elif sl.kind == TEXT_DONE:
                done = True
            else:
                raise ContractError(f"slot {pos}: expected aligned slot, got {sl}")
            pos += 1
        k = 0
        while pos < len(slots) - 1 and slots[pos].kind == UNIT and k < cfg.M:
            y.append(slots[pos].value)
            pos += 1
            k += 1
    if any(sl.kind in (BOS, EOS) for sl in slots[1:-1]):
        raise ContractError("control slot inside sequence")
    if len(s) != seq.z.shape[0]:
        raise ContractError(f"{len(s)} aligned slots but {seq.z.shape[0]} latent rows")
    if interleave(s, seq.z, y, cfg).slots != slots:
        raise ContractError("slot pattern does not follow the interleave schedule")
    return s, seq.z, y


def loss_targets(seq: InterleavedSequence, eos_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions whose next slot is a unit or EOS, and the id to predict there."""
    pos, tgt = [], []
    for t in range(len(seq.slots) - 1):
        nxt = seq.slots[t + 1]
        if nxt.kind == UNIT:
            pos.append(t)
            tgt.append(nxt.value)
        elif nxt.kind == EOS:
            pos.append(t)
            tgt.append(eos_id)
    return np.asarray(pos, dtype=np.int64), np.asarray(tgt, dtype=np.int64)


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 2
    unit_vocab: int = 17
    vocab: int = 8
    aligned_dim: int = 16
    N: int = 2
    M: int = 5
    silence_unit: int = 16
    max_units_per_token: int = 6
    occurrence_period: int = 8
    run_cap: int = 16
    slot_span: int = 32
    coord_min: int = -3
    coord_max: int = 6

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.coord_min > 0 or self.coord_max < 1:
            raise ValueError("coordinate bias range must cover 0 and 1")

    @property
    def eos(self) -> int:
        return self.unit_vocab

    @property
    def interleave(self) -> InterleaveConfig:
        return InterleaveConfig(self.N, self.M)

    @property
    def coord_buckets(self) -> int:
        return self.coord_max - self.coord_min + 2


# -- slot features ------------------------------------------------------------

@dataclass
class FeatureState:
    """Running statistics over a slot prefix (shared by batch and incremental paths)."""

    cfg: DecoderConfig
    last_unit: int = -1
    run: int = 0
    char_runs: int = 0
    tokens: int = 0
    occurrences: dict = field(default_factory=dict)

    def push(self, slot: Slot) -> tuple[int, int, int, int, int]:
        """Features of ``slot``: (token id, last unit, run, progress, key token index)."""
        cfg = self.cfg
        none_tok = cfg.vocab * cfg.occurrence_period + cfg.unit_vocab
        tok, key_index = none_tok, -1
        if slot.kind == ALIGNED:
            occ = self.occurrences.get(slot.value, 0)
            self.occurrences[slot.value] = occ + 1
            tok = slot.value * cfg.occurrence_period + occ % cfg.occurrence_period
            key_index = self.tokens
            self.tokens += 1
        elif slot.kind == TEXT_DONE:
            key_index = self.tokens
            self.tokens += 1
        elif slot.kind == UNIT:
            tok = cfg.vocab * cfg.occurrence_period + slot.value
            if slot.value == self.last_unit:
                self.run += 1
            else:
                self.run = 1
                if slot.value != cfg.silence_unit:
                    self.char_runs += 1
            self.last_unit = slot.value
        last = cfg.unit_vocab if self.last_unit < 0 else self.last_unit
        return tok, last, min(self.run, cfg.run_cap - 1), self.char_runs - 1, key_index


def slot_features(slots, cfg: DecoderConfig) -> dict[str, np.ndarray]:
    st = FeatureState(cfg)
    rows = [st.push(sl) for sl in slots]
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 5)
    return {"kind": np.asarray([sl.kind for sl in slots], dtype=np.int64),
            "tok": arr[:, 0], "last": arr[:, 1], "run": arr[:, 2],
            "progress": arr[:, 3], "key_index": arr[:, 4]}


def coord_index(key_index: np.ndarray, progress: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    """Bias-table column for each (query, key) pair; keys without a token use the last column."""
    rel = np.clip(key_index[None, :] - progress[:, None], cfg.coord_min, cfg.coord_max) - cfg.coord_min
    return np.where(key_index[None, :] >= 0, rel, cfg.coord_buckets - 1)


# -- model ---------------------------------------------------------------------

class DecoderBlock(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        d = cfg.d_model
        self.heads = cfg.num_heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d, gain=0.5)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, 4 * d)
        self.slot_bias = RelativeBias(cfg.num_heads, cfg.slot_span)
        self.coord_bias = RelativeBias(cfg.num_heads, cfg.coord_buckets)

    def __call__(self, x: Tensor, blocks, cache=None) -> Tensor:
        """``blocks``: ``(qa, qb, ka, kb, mask, slot distance, coordinate column)`` per sequence."""
        q, k, v = split_cols(self.qkv(self.ln1(x)), 3)
        if cache is not None:
            cache[0] = np.concatenate([cache[0], k.data])
            cache[1] = np.concatenate([cache[1], v.data])
            k, v = nc.tensor(cache[0]), nc.tensor(cache[1])
        bl = []
        for qa, qb, ka, kb, mask, dist, coord in blocks:
            biases = [nc.add(a, b) for a, b in zip(self.slot_bias.heads(dist), self.coord_bias.heads_at(coord))]
            bl.append((qa, qb, ka, kb, mask, biases))
        a, _ = attend_blocks(q, k, v, self.heads, bl)
        x = nc.add(x, self.proj(a))
        return nc.add(x, self.mlp(self.ln2(x)))


class UnitDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.d_model
        self.kind = Embedding(rng, 5, d)
        self.tok = Embedding(rng, cfg.vocab * cfg.occurrence_period + cfg.unit_vocab + 1, d)
        self.last = Embedding(rng, cfg.unit_vocab + 1, d)
        self.run = Embedding(rng, cfg.run_cap, d)
        self.zproj = Linear(rng, cfg.aligned_dim, d, bias=False)
        self.blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.num_layers)]
        self.ln = LayerNorm(d)
        self.out = Linear(rng, d, cfg.unit_vocab + 1)

    def embed(self, feats: dict, z_rows: Tensor | None, z_index: np.ndarray) -> Tensor:
        x = nc.add(self.kind(feats["kind"]), self.tok(feats["tok"]))
        x = nc.add(x, nc.add(self.last(feats["last"]), self.run(feats["run"])))
        if z_rows is not None and z_rows.shape[0]:
            sel = np.zeros((len(z_index), z_rows.shape[0]), np.float32)
            hit = np.flatnonzero(z_index >= 0)
            sel[hit, z_index[hit]] = 1.0
            x = nc.add(x, nc.matmul(nc.tensor(sel), self.zproj(z_rows)))
        return x

    def forward(self, seqs: list[InterleavedSequence], z: Tensor | None = None) -> Tensor:
        """Next-slot logits for every slot of a packed batch.

        ``z`` stacks the latent rows of all sequences in order; when omitted
        the rows stored in the sequences are used (no gradient).
        """
        feats = [slot_features(sq.slots, self.cfg) for sq in seqs]
        cat = {k: np.concatenate([f[k] for f in feats]) for k in feats[0]}
        z_index, base = [], 0
        for sq in seqs:
            zi = np.full(len(sq), -1, np.int64)
            al = [t for t, sl in enumerate(sq.slots) if sl.kind == ALIGNED]
            zi[al] = base + np.arange(len(al))
            z_index.append(zi)
            base += sq.z.shape[0]
        if z is None:
            z = nc.tensor(np.concatenate([sq.z for sq in seqs]).reshape(base, -1)) if base else None
        elif z.shape[0] != base:
            raise ContractError(f"{base} aligned slots but {z.shape[0]} latent rows")
        x = self.embed(cat, z, np.concatenate(z_index))
        blocks, a = [], 0
        for f in feats:
            n = len(f["kind"])
            idx = np.arange(n)
            blocks.append((a, a + n, a, a + n, idx[None, :] <= idx[:, None], idx[:, None] - idx[None, :],
                           coord_index(f["key_index"], f["progress"], self.cfg)))
            a += n
        for blk in self.blocks:
            x = blk(x, blocks)
        return self.out(self.ln(x))

    def start(self) -> "DecoderState":
        d = self.cfg.d_model
        caches = [[np.zeros((0, d), np.float32), np.zeros((0, d), np.float32)] for _ in self.blocks]
        return DecoderState(caches, FeatureState(self.cfg))

    def step(self, state: "DecoderState", slot: Slot, z_row: np.ndarray | None = None) -> np.ndarray:
        """Feed one slot; returns the logits row predicted at it."""
        tok, last, run, prog, key = state.features.push(slot)
        feats = {"kind": np.array([slot.kind]), "tok": np.array([tok]), "last": np.array([last]),
                 "run": np.array([run])}
        state.key_index.append(key)
        t = len(state.key_index) - 1
        with nc.no_grad(), nc.deterministic_kernels():
            zr = None if z_row is None else nc.tensor(np.asarray(z_row, np.float32)[None, :])
            x = self.embed(feats, zr, np.array([0 if z_row is not None else -1]))
            mask = np.ones((1, t + 1), dtype=bool)
            dist = (t - np.arange(t + 1))[None, :]
            coord = coord_index(np.asarray(state.key_index), np.array([prog]), self.cfg)
            blocks = [(0, 1, 0, t + 1, mask, dist, coord)]
            for blk, cache in zip(self.blocks, state.caches):
                x = blk(x, blocks, cache)
            return self.out(self.ln(x)).data[0].copy()


@dataclass
class DecoderState:
    caches: list
    features: FeatureState
    key_index: list = field(default_factory=list)


def ce_loss(logits: Tensor, positions, targets) -> Tensor:
    """Mean negative log-likelihood over unit/EOS prediction positions."""
    return nc.cross_entropy(nc.embedding(logits, positions), targets)


def decoder_loss(dec: UnitDecoder, seqs: list[InterleavedSequence], z: Tensor | None = None):
    """Packed-batch loss plus (positions, targets, logits) for accuracy bookkeeping."""
    logits = dec.forward(seqs, z)
    pos, tgt, off = [], [], 0
    for sq in seqs:
        p, t = loss_targets(sq, dec.cfg.eos)
        pos.append(p + off)
        tgt.append(t)
        off += len(sq)
    pos, tgt = np.concatenate(pos), np.concatenate(tgt)
    return ce_loss(logits, pos, tgt), pos, tgt, logits


# -- generation ----------------------------------------------------------------

@dataclass
class Generation:
    units: list[int]
    truncated: bool = False
    chunks: list = field(default_factory=list)
    slots: int = 0


class StreamingUnitGenerator:
    """Greedy generation that accepts aligned tokens incrementally.

    A group's units are produced as soon as its N aligned slots are known;
    ``finish`` pads with TEXT_DONE groups until EOS or the slot cap.
    """

    def __init__(self, dec: UnitDecoder, max_tokens_hint: int | None = None):
        self.dec = dec
        self.cfg = dec.cfg
        self.state = dec.start()
        self.pending: list[tuple[int, np.ndarray]] = []
        self.out = Generation([])
        self.n_tokens = 0
        self.done = False
        self.logits = dec.step(self.state, Slot(BOS))
        self.out.slots = 1

    def cap(self, n_tokens: int) -> int:
        return 12 * self.cfg.max_units_per_token * max(n_tokens, 1)

    def push(self, token: int, z_row: np.ndarray) -> list[list[int]]:
        """Add one aligned token; returns unit chunks completed by it."""
        if self.done:
            return []
        self.n_tokens += 1
        self.pending.append((int(token), np.asarray(z_row, np.float32)))
        chunks = []
        while len(self.pending) >= self.cfg.N and not self.done:
            chunks.append(self._group(self.pending[:self.cfg.N], self.n_tokens))
            del self.pending[:self.cfg.N]
        return [c for c in chunks if c]

    def finish(self) -> Generation:
        total = self.n_tokens
        while not self.done:
            group, self.pending = self.pending, []
            self._group(group, total)
        return self.out

    def _group(self, group, n_total: int) -> list[int]:
        dec, st = self.dec, self.state
        cap = self.cap(n_total)
        chunk = []
        for j in range(self.cfg.N):
            if self.out.slots >= cap:
                return self._truncate(chunk)
            if j < len(group):
                self.logits = dec.step(st, Slot(ALIGNED, group[j][0]), group[j][1])
            else:
                self.logits = dec.step(st, Slot(TEXT_DONE))
            self.out.slots += 1
        for _ in range(self.cfg.M):
            u = int(np.argmax(self.logits))
            if u == self.cfg.eos:
                self.done = True
                break
            if self.out.slots >= cap:
                return self._truncate(chunk)
            chunk.append(u)
            self.out.units.append(u)
            self.logits = dec.step(st, Slot(UNIT, u))
            self.out.slots += 1
        else:
            if int(np.argmax(self.logits)) == self.cfg.eos:
                self.done = True
        if chunk:
            self.out.chunks.append(chunk)
        return chunk

    def _truncate(self, chunk):
        self.out.truncated = True
        self.done = True
        if chunk:
            self.out.chunks.append(chunk)
        return chunk


def generate(dec: UnitDecoder, s, zhat) -> Generation:
    """Offline greedy generation (same schedule as the streaming generator)."""
    gen = StreamingUnitGenerator(dec)
    zhat = np.asarray(zhat, np.float32)
    for i, t in enumerate(s):
        gen.push(t, zhat[i])
    return gen.finish()

"""Causal speech encoder, CTC head and text-aligned aggregator.

The encoder has no absolute positional encoding: attention carries a learned
bias over the clipped query-key distance, so a window that starts mid-stream
looks exactly like an utterance start.  The aggregator pools encoder frames
into one latent per text token; token ``i`` only sees frames up to its anchor
(the first frame of its CTC run), with a learned bias over the lag
``anchor - frame``.

Training uses packed batches: many utterances concatenated along the row axis
with segment ids keeping attention inside each utterance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import ctc
from . import numcore as nc
from .nn import MLP, Embedding, LayerNorm, Linear, Module, RelativeBias, attend_blocks, split_cols
from .numcore import Tensor


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    shallow_layer: int = 1
    d_model: int = 32
    num_heads: int = 2
    feature_dim: int = 16
    vocab: int = 8
    aligned_dim: int = 16
    agg_dim: int = 64
    agg_heads: int = 8
    rel_span: int = 32
    agg_span: int = 16
    mlp_mult: int = 4

    def __post_init__(self):
        if not 1 <= self.shallow_layer < self.num_layers:
            raise EncoderError(f"need 1 <= shallow_layer < num_layers, got {self.shallow_layer}, {self.num_layers}")
        if self.d_model % self.num_heads or self.agg_dim % self.agg_heads:
            raise EncoderError("model widths must be divisible by their head counts")

    @property
    def blank(self) -> int:
        return self.vocab


@dataclass
class AlignedLatents:
    z: np.ndarray
    anchors: list[int]
    attention: np.ndarray | None = None

    def __len__(self):
        return len(self.anchors)


@dataclass
class KVCache:
    k: np.ndarray
    v: np.ndarray


class CausalBlock(Module):
    """Pre-norm transformer block with causal self-attention."""

    def __init__(self, rng, d: int, heads: int, span: int, mlp_mult: int):
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d, gain=0.5)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_mult * d)
        self.rel = RelativeBias(heads, span)

    def __call__(self, x: Tensor, blocks, cache: KVCache | None = None) -> Tensor:
        """``blocks``: ``(qa, qb, ka, kb, mask, dist)`` row ranges with their mask and distances."""
        q, k, v = split_cols(self.qkv(self.ln1(x)), 3)
        if cache is not None:
            cache.k = np.concatenate([cache.k, k.data])
            cache.v = np.concatenate([cache.v, v.data])
            k, v = nc.tensor(cache.k), nc.tensor(cache.v)
        bl = [(qa, qb, ka, kb, m, self.rel.heads(d)) for qa, qb, ka, kb, m, d in blocks]
        a, _ = attend_blocks(q, k, v, self.heads, bl)
        x = nc.add(x, self.proj(a))
        return nc.add(x, self.mlp(self.ln2(x)))


def segment_bounds(seg: np.ndarray) -> list[tuple[int, int]]:
    """Row ranges of consecutive equal segment ids."""
    if len(seg) == 0:
        return []
    cuts = np.r_[0, np.flatnonzero(np.diff(seg)) + 1, len(seg)]
    return [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:])]


def causal_blocks(seg: np.ndarray) -> list:
    out = []
    for a, b in segment_bounds(seg):
        n = b - a
        out.append((a, b, a, b, nc.causal_mask(n), np.arange(n)[:, None] - np.arange(n)[None, :]))
    return out


class AsrEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.inp = Linear(rng, cfg.feature_dim, cfg.d_model)
        self.blocks = [CausalBlock(rng, cfg.d_model, cfg.num_heads, cfg.rel_span, cfg.mlp_mult)
                       for _ in range(cfg.num_layers)]

    def __call__(self, frames: Tensor, seg: np.ndarray | None = None) -> list[Tensor]:
        """All layer outputs ``[H1..HL]`` for (packed) frames."""
        if frames.shape[1] != self.cfg.feature_dim:
            raise EncoderError(f"expected {self.cfg.feature_dim}-dim frames, got {frames.shape[1]}")
        T = frames.shape[0]
        blocks = causal_blocks(np.zeros(T, np.int64) if seg is None else np.asarray(seg))
        x = self.inp(frames)
        out = []
        for blk in self.blocks:
            x = blk(x, blocks)
            out.append(x)
        return out

    def step(self, frames: Tensor, caches: list[KVCache], offset: int) -> list[Tensor]:
        """Append a chunk of frames at absolute position ``offset`` using KV caches."""
        C = frames.shape[0]
        mask = nc.causal_mask(C, offset + C, offset)
        dist = (np.arange(C) + offset)[:, None] - np.arange(offset + C)[None, :]
        blocks = [(0, C, 0, offset + C, mask, dist)]
        x = self.inp(frames)
        out = []
        for blk, cache in zip(self.blocks, caches):
            x = blk(x, blocks, cache)
            out.append(x)
        return out

    def empty_caches(self) -> list[KVCache]:
        d = self.cfg.d_model
        return [KVCache(np.zeros((0, d), np.float32), np.zeros((0, d), np.float32))
                for _ in self.blocks]


class CtcHead(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.out = Linear(rng, cfg.d_model, cfg.vocab + 1)

    def __call__(self, h_last: Tensor) -> Tensor:
        return nc.log_softmax_rows(self.out(h_last))


class Aggregator(Module):
    """One cross-attention block from text-token queries to encoder frames."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        d = cfg.agg_dim
        self.text = Embedding(rng, cfg.vocab, d)
        self.prev = Embedding(rng, cfg.vocab + 1, d)
        self.q = Linear(rng, d, d)
        self.kv = Linear(rng, 3 * cfg.d_model, 2 * d)
        self.lag = RelativeBias(cfg.agg_heads, cfg.agg_span)
        self.lag_values = nc.parameter((0.5 * rng.standard_normal((cfg.agg_span, d))).astype(np.float32))
        self.proj = Linear(rng, d, d, gain=0.5)
        self.ln = LayerNorm(d)
        self.mlp = MLP(rng, d, 2 * d)
        self.ln_out = LayerNorm(d)
        self.out = Linear(rng, d, cfg.aligned_dim)

    def keys_values(self, h_shallow: Tensor, h_last: Tensor, seg=None,
                    prev_row: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Per-frame keys/values from the shallow and last hiddens plus the
        frame-to-frame change of the shallow one (zero at segment starts).

        ``prev_row`` is the shallow hidden just before this block (streaming).
        """
        T = h_shallow.shape[0]
        idx = np.arange(T) - 1
        if prev_row is None:
            src = h_shallow
            starts = [0] if seg is None else [a for a, _ in segment_bounds(np.asarray(seg))]
            idx[starts] = starts
        else:
            src = nc.concat_rows([nc.tensor(prev_row.reshape(1, -1)), h_shallow])
            idx += 1
        delta = nc.sub(h_shallow, nc.take_rows(src, idx))
        k, v = split_cols(self.kv(nc.concat_cols([h_shallow, h_last, delta])), 2)
        return k, v

    def __call__(self, tokens, anchors, k: Tensor, v: Tensor, token_seg=None, frame_seg=None,
                 first_prev: int | None = None):
        """Latents ``Z`` (n x d_z) and the head-averaged attention map.

        ``anchors`` index rows of ``k``/``v``; with packed batches the segment
        ids keep each token inside its own utterance.  Queries also see the
        preceding token; ``first_prev`` supplies it for the first query when
        tokens arrive piecewise (streaming).
        """
        anchors = np.asarray(anchors, dtype=np.int64)
        n, T = len(anchors), k.shape[0]
        if n and (anchors.min() < 0 or anchors.max() >= T):
            raise EncoderError(f"anchor out of range [0, {T})")
        if token_seg is None:
            spans = [(0, n, 0, T)] if n else []
        else:
            frame_spans = {int(frame_seg[a]): (a, b) for a, b in segment_bounds(np.asarray(frame_seg))}
            spans = [(ta, tb) + frame_spans[int(token_seg[ta])]
                     for ta, tb in segment_bounds(np.asarray(token_seg))]
        tokens = np.asarray(tokens, dtype=np.int64)
        prev = np.full(n, self.cfg.vocab, dtype=np.int64)
        for ta, tb, _, _ in spans:
            prev[ta + 1:tb] = tokens[ta:tb - 1]
        if first_prev is not None and n:
            prev[0] = first_prev
        e = self.text(tokens)
        q = self.q(nc.add(e, self.prev(prev)))
        blocks = []
        for ta, tb, fa, fb in spans:
            lag = anchors[ta:tb, None] - np.arange(fa, fb)[None, :]
            blocks.append((ta, tb, fa, fb, lag >= 0, self.lag.heads(lag), self.lag.index(lag)))
        a, maps = attend_blocks(q, k, v, self.cfg.agg_heads, blocks, self.lag_values)
        attn = maps[0] if len(maps) == 1 else maps
        x = nc.add(e, self.proj(a))
        x = nc.add(x, self.mlp(self.ln(x)))
        return self.out(self.ln_out(x)), attn


def proportional_anchors(n: int, T: int) -> list[int]:
    """Monotonic anchors spread over [0, T) for transcripts without CTC timing."""
    if n == 0:
        return []
    if n > T:
        raise EncoderError(f"cannot anchor {n} tokens strictly inside {T} frames")
    return [int(i * T // n) for i in range(n)]


class Encoder(Module):
    """ASR encoder + CTC head + aggregator, with offline and streaming entry points."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.asr = AsrEncoder(cfg, rng)
        self.ctc = CtcHead(cfg, rng)
        self.agg = Aggregator(cfg, rng)

    # -- building blocks (graph-recording, mode-agnostic) --
    def asr_encode(self, frames, seg=None) -> list[Tensor]:
        frames = frames if isinstance(frames, Tensor) else nc.tensor(frames)
        return self.asr(frames, seg)

    def ctc_head(self, h_last: Tensor) -> Tensor:
        return self.ctc(h_last)

    def aggregate(self, s_hat, anchors, hiddens: list[Tensor]) -> tuple[Tensor, np.ndarray]:
        anchors = list(anchors)
        if any(b <= a for a, b in zip(anchors, anchors[1:])):
            raise EncoderError("anchors must be strictly increasing")
        k, v = self.agg.keys_values(hiddens[self.cfg.shallow_layer - 1], hiddens[-1])
        return self.agg(s_hat, anchors, k, v)

    # -- inference --
    def encode(self, frames, transcript_override=None, anchors=None):
        """Offline encoding: ``(s_hat, AlignedLatents, log_probs)``.

        Without an override the transcript and anchors come from greedy CTC.
        An override transcript keeps the CTC anchors when lengths agree and
        falls back to proportional spacing otherwise.
        """
        frames = np.asarray(frames, dtype=np.float32)
        with nc.no_grad(), nc.deterministic_kernels():
            hid = self.asr_encode(frames)
            logp = self.ctc_head(hid[-1]).data
            tokens, frames_at = ctc.greedy_decode(logp, self.cfg.blank)
            if transcript_override is not None:
                override = [int(t) for t in transcript_override]
                if anchors is None:
                    anchors = frames_at if len(override) == len(tokens) else \
                        proportional_anchors(len(override), len(frames))
                tokens = override
            elif anchors is None:
                anchors = frames_at
            anchors = [int(a) for a in anchors]
            if len(anchors) != len(tokens):
                raise EncoderError(f"{len(tokens)} tokens but {len(anchors)} anchors")
            if not tokens:
                return [], AlignedLatents(np.zeros((0, self.cfg.aligned_dim), np.float32), [],
                                          np.zeros((0, len(frames)), np.float32)), logp
            z, attn = self.aggregate(tokens, anchors, hid)
        return tokens, AlignedLatents(z.data.copy(), anchors, attn), logp


@dataclass
class EncoderStreamState:
    """Incremental encoder state: per-layer KV caches plus aggregator keys/values."""

    caches: list
    agg_k: np.ndarray
    agg_v: np.ndarray
    decoder: ctc.StreamingCtcDecoder
    last_shallow: np.ndarray | None = None
    offset: int = 0
    base: int = 0
    prev_token: int | None = None
    logp: list = field(default_factory=list)


def init_stream(enc: Encoder, base: int = 0, decoder: ctc.StreamingCtcDecoder | None = None,
                prev_token: int | None = None) -> EncoderStreamState:
    d = enc.cfg.agg_dim
    dec = decoder or ctc.StreamingCtcDecoder(enc.cfg.blank, next_frame=base)
    return EncoderStreamState(enc.asr.empty_caches(), np.zeros((0, d), np.float32),
                              np.zeros((0, d), np.float32), dec, None, 0, base, prev_token)


def stream_step(enc: Encoder, state: EncoderStreamState, chunk: np.ndarray):
    """Feed a chunk of frames; returns newly finalized ``(token, anchor, z_row)`` triples.

    ``anchor`` is an absolute frame index; ``state.base`` is the absolute index
    of the first frame held in the caches.
    """
    chunk = np.asarray(chunk, dtype=np.float32)
    if chunk.shape[0] == 0:
        return []
    with nc.no_grad(), nc.deterministic_kernels():
        hid = enc.asr.step(nc.tensor(chunk), state.caches, state.offset)
        logp = enc.ctc_head(hid[-1]).data
        shallow = hid[enc.cfg.shallow_layer - 1]
        k, v = enc.agg.keys_values(shallow, hid[-1], prev_row=state.last_shallow)
        state.last_shallow = shallow.data[-1].copy()
        state.agg_k = np.concatenate([state.agg_k, k.data])
        state.agg_v = np.concatenate([state.agg_v, v.data])
        state.logp.append(logp)
        state.offset += chunk.shape[0]
        done = state.decoder.step(logp)
        # runs anchored before this window were handed to the previous one
        return latents_for(enc, state, [(t, f) for t, f in done if f >= state.base])


def latents_for(enc: Encoder, state: EncoderStreamState, finalized) -> list:
    """Aggregate finalized tokens against the cached frames (anchors are absolute)."""
    if not finalized:
        return []
    toks = [t for t, _ in finalized]
    local = [a - state.base for _, a in finalized]
    with nc.no_grad(), nc.deterministic_kernels():
        z, _ = enc.agg(toks, local, nc.tensor(state.agg_k), nc.tensor(state.agg_v),
                       first_prev=state.prev_token)
    state.prev_token = toks[-1]
    return [(t, a, z.data[i].copy()) for i, (t, a) in enumerate(finalized)]


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)

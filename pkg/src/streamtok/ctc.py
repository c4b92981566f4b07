"""CTC loss, greedy decoding and a brute-force alignment oracle.

Log-probability matrices have ``V + 1`` columns; the last column is blank.
The loss runs the forward recursion over the blank-extended label in
float64 log space and gets its gradient from forward/backward posteriors,
so it plugs into ``numcore`` as a single recorded op.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractError, Tensor, logsumexp, record

BRUTE_FORCE_LIMIT = 2 ** 20


class OracleScaleError(ValueError):
    """Brute-force enumeration would exceed the desk guard."""


def collapse(path, blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(labels) -> int:
    """Shortest input that can emit ``labels``: one frame each plus a blank per repeat."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def _extend(labels, blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _alpha(E: np.ndarray, ext: np.ndarray, lengths: np.ndarray, blank: int) -> np.ndarray:
    """Batched forward recursion.

    E: (B, T, S) emission log-probs along the extended labels (padded), ext:
    (B, S) extended labels padded with -1, lengths: (B,) extended lengths.
    Returns alpha of shape (B, T, S) including the emission at each frame.
    """
    B, T, S = E.shape
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2]) & (ext[:, 2:] >= 0)
    valid = np.arange(S)[None, :] < lengths[:, None]
    alpha = np.full((B, T, S), -np.inf)
    a = np.full((B, S), -np.inf)
    a[:, 0] = E[:, 0, 0]
    a[:, 1] = np.where(lengths > 1, E[:, 0, 1], -np.inf)
    alpha[:, 0] = a
    neg = np.full((B, 1), -np.inf)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            s1 = np.concatenate([neg, a[:, :-1]], axis=1)
            s2 = np.concatenate([neg, neg, a[:, :-2]], axis=1)
            s2 = np.where(skip, s2, -np.inf)
            a = np.logaddexp(np.logaddexp(a, s1), s2) + E[:, t]
            a = np.where(valid, a, -np.inf)
            alpha[:, t] = a
    return alpha


def ctc_batch(logprobs: np.ndarray, segments, transcripts, blank: int):
    """Losses and gradient of the summed loss w.r.t. the packed log-prob rows.

    ``segments`` are ``(start, stop)`` row ranges into ``logprobs``.  Infeasible
    items get loss +inf and zero gradient.
    """
    O = np.asarray(logprobs, dtype=np.float64)
    B = len(segments)
    Ts = np.array([b - a for a, b in segments], dtype=np.int64)
    exts = [_extend(s, blank) for s in transcripts]
    Ls = np.array([len(e) for e in exts], dtype=np.int64)
    losses = np.full(B, np.inf)
    grad = np.zeros_like(O)
    feasible = np.array([T > 0 and min_frames(s) <= T for T, s in zip(Ts, transcripts)])
    if not feasible.any():
        return losses, grad
    idx = np.flatnonzero(feasible)
    T, S = int(Ts[idx].max()), max(2, int(Ls[idx].max()))
    ext = np.full((len(idx), S), -1, dtype=np.int64)
    E = np.zeros((len(idx), T, S))
    Er = np.zeros((len(idx), T, S))
    ext_r = np.full((len(idx), S), -1, dtype=np.int64)
    for j, b in enumerate(idx):
        e, (a0, a1), L, Tb = exts[b], segments[b], Ls[b], Ts[b]
        ext[j, :L] = e
        ext_r[j, :L] = e[::-1]
        rows = O[a0:a1]
        E[j, :Tb, :L] = rows[:, e]
        Er[j, :Tb, :L] = rows[::-1][:, e[::-1]]
    alpha = _alpha(E, ext, Ls[idx], blank)
    beta_r = _alpha(Er, ext_r, Ls[idx], blank)
    for j, b in enumerate(idx):
        L, Tb = Ls[b], Ts[b]
        a_last = alpha[j, Tb - 1]
        logp = np.logaddexp(a_last[L - 1], a_last[L - 2] if L > 1 else -np.inf)
        losses[b] = -logp
        if not np.isfinite(logp):
            losses[b] = np.nan if np.isnan(logp) else np.inf
            continue
        beta = beta_r[j, :Tb, :L][::-1, ::-1]
        post = alpha[j, :Tb, :L] + beta - E[j, :Tb, :L] - logp
        g = np.zeros((Tb, O.shape[1]))
        occ = np.exp(post)
        for col in np.unique(exts[b]):
            g[:, col] = occ[:, exts[b] == col].sum(axis=1)
        a0, a1 = segments[b]
        grad[a0:a1] = -g
    return losses, grad


def ctc_loss(O: Tensor, s, blank: int | None = None) -> Tensor:
    """-log p_CTC(s | O) for one log-prob matrix; +inf when infeasible."""
    blank = O.shape[1] - 1 if blank is None else blank
    s = [int(x) for x in s]
    if any(not 0 <= x < blank for x in s):
        raise ContractError(f"transcript tokens must lie in [0, {blank})")
    losses, grad = ctc_batch(O.data, [(0, O.shape[0])], [s], blank)
    return record(np.asarray(losses[0]), (O,), lambda g: (grad * g,))


def ctc_loss_batch(O: Tensor, segments, transcripts, blank: int | None = None):
    """Mean CTC loss over feasible items of a packed batch.

    Returns ``(loss_tensor, per_item_losses)``; infeasible items are +inf in
    the per-item array and excluded from the mean.
    """
    blank = O.shape[1] - 1 if blank is None else blank
    losses, grad = ctc_batch(O.data, segments, transcripts, blank)
    keep = ~np.isposinf(losses)  # NaN stays in so divergence is not hidden
    n = int(keep.sum())
    mean = float(losses[keep].mean()) if n else 0.0
    return record(np.asarray(mean), (O,), lambda g: (grad * (g / max(n, 1)),)), losses


# -- oracle ------------------------------------------------------------------

def _paths(O):
    T, K = O.shape
    if K ** T > BRUTE_FORCE_LIMIT:
        raise OracleScaleError(f"{K}^{T} paths exceeds the brute-force guard of {BRUTE_FORCE_LIMIT}")
    return itertools.product(range(K), repeat=T)


def brute_force_ctc(O, s, blank: int | None = None) -> float:
    """Enumerate every path, keep those collapsing to ``s``; returns -log of their mass."""
    O = np.asarray(O.data if isinstance(O, Tensor) else O, dtype=np.float64)
    blank = O.shape[1] - 1 if blank is None else blank
    target = [int(x) for x in s]
    rows = np.arange(O.shape[0])
    scores = [O[rows, list(p)].sum() for p in _paths(O) if collapse(p, blank) == target]
    if not scores:
        return float("inf")
    return float(-logsumexp(np.array(scores)))


def transcript_distribution(O, blank: int | None = None) -> dict[tuple, float]:
    """p(s' | O) for every transcript reachable from ``O`` (by enumeration)."""
    O = np.asarray(O.data if isinstance(O, Tensor) else O, dtype=np.float64)
    blank = O.shape[1] - 1 if blank is None else blank
    rows = np.arange(O.shape[0])
    acc: dict[tuple, float] = {}
    for p in _paths(O):
        key = tuple(collapse(p, blank))
        acc[key] = acc.get(key, 0.0) + float(np.exp(O[rows, list(p)].sum()))
    return acc


# -- decoding ----------------------------------------------------------------

def greedy_decode(O, blank: int | None = None) -> tuple[list[int], list[int]]:
    """Argmax path collapse; emission frame = first frame of each token's run."""
    O = np.asarray(O.data if isinstance(O, Tensor) else O)
    blank = O.shape[1] - 1 if blank is None else blank
    dec = StreamingCtcDecoder(blank)
    dec.step(O)
    dec.flush()
    return dec.tokens, dec.frames


@dataclass
class StreamingCtcDecoder:
    """Greedy CTC over rows appended in frame order.

    A run is finalized when a different argmax symbol follows it, so the
    concatenation of everything returned by ``step`` and ``flush`` equals
    ``greedy_decode`` on the whole matrix.
    """

    blank: int
    next_frame: int = 0
    run_symbol: int | None = None
    run_start: int = -1
    tokens: list[int] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)

    def step(self, rows, start_frame: int | None = None) -> list[tuple[int, int]]:
        rows = np.asarray(rows)
        if start_frame is not None and start_frame != self.next_frame:
            raise ContractError(f"rows for frame {start_frame} appended but frame {self.next_frame} expected")
        best = rows.argmax(axis=1) if rows.ndim == 2 else rows.astype(np.int64)
        out = []
        for sym in best:
            sym = int(sym)
            if sym != self.run_symbol:
                if self.run_symbol is not None and self.run_symbol != self.blank:
                    out.append((self.run_symbol, self.run_start))
                self.run_symbol, self.run_start = sym, self.next_frame
            self.next_frame += 1
        self._keep(out)
        return out

    def pending(self) -> tuple[int, int] | None:
        """The open non-blank run, if any, as ``(token, start_frame)``."""
        if self.run_symbol is None or self.run_symbol == self.blank:
            return None
        return self.run_symbol, self.run_start

    def flush(self) -> list[tuple[int, int]]:
        out = [self.pending()] if self.pending() else []
        self.run_symbol, self.run_start = None, -1
        self._keep(out)
        return out

    def _keep(self, out):
        for tok, fr in out:
            self.tokens.append(tok)
            self.frames.append(fr)

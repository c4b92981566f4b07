"""Small layer library on top of numcore: parameters, linear maps, blocks."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class Module:
    """Anything holding parameters; attributes are discovered by reflection."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def init_matrix(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True, gain: float = 1.0):
        self.weight = nc.parameter(init_matrix(rng, n_in, n_out, gain))
        self.bias = nc.parameter(np.zeros(n_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nc.matmul(x, self.weight)
        return y if self.bias is None else nc.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gain = nc.parameter(np.ones(n, np.float32))
        self.bias = nc.parameter(np.zeros(n, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layernorm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng, n: int, d: int, std: float = 0.5):
        self.table = nc.parameter((rng.standard_normal((n, d)) * std).astype(np.float32))

    def __call__(self, ids) -> Tensor:
        return nc.embedding(self.table, ids)


class MLP(Module):
    def __init__(self, rng, d: int, hidden: int, d_out: int | None = None):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d if d_out is None else d_out, gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


def split_cols(x: Tensor, n: int) -> list[Tensor]:
    """Split columns into ``n`` equal parts (head slicing)."""
    w = x.shape[1] // n
    return [cols(x, i * w, (i + 1) * w) for i in range(n)]


def cols(x: Tensor, a: int, b: int) -> Tensor:
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[:, a:b] = g
        return (out,)

    return nc.record(x.data[:, a:b], (x,), bw)


def rows(x: Tensor, a: int, b: int) -> Tensor:
    if a == 0 and b == x.shape[0]:
        return x
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[a:b] = g
        return (out,)

    return nc.record(x.data[a:b], (x,), bw)


class RelativeBias(Module):
    """Learned per-head additive attention bias indexed by a clipped distance."""

    def __init__(self, heads: int, span: int, offset: int = 0):
        self.span = span
        self.offset = offset
        self.table = nc.parameter(np.zeros((heads, span), np.float32))

    def index(self, dist: np.ndarray) -> np.ndarray:
        return np.clip(dist + self.offset, 0, self.span - 1)

    def heads(self, dist: np.ndarray) -> list[Tensor]:
        return self.heads_at(self.index(dist))

    def heads_at(self, idx: np.ndarray) -> list[Tensor]:
        """Per-head bias matrices for precomputed table columns."""
        flat = _flatten(self.table)
        return [nc.gather(flat, h * self.span + idx) for h in range(self.table.shape[0])]


def _flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return nc.record(x.data.reshape(-1), (x,), lambda g: (g.reshape(shape),))


def attend_blocks(q: Tensor, k: Tensor, v: Tensor, heads: int, blocks, rel_table: Tensor | None = None):
    """Block-diagonal multi-head attention.

    ``blocks`` holds ``(qa, qb, ka, kb, mask, biases[, rel_index])``: query
    rows qa:qb attend to key rows ka:kb only.  With ``rel_table`` each block
    also needs the relative-position row index of every (query, key) pair.
    Returns the concatenated output and the per-block mean attention maps.
    """
    outs, maps, covered = [], [], 0
    for blk in blocks:
        qa, qb, ka, kb, mask, biases = blk[:6]
        if qa != covered:
            raise ValueError("query blocks must tile the rows in order")
        rel = (blk[6], rel_table) if rel_table is not None else None
        o, w = multihead(rows(q, qa, qb), rows(k, ka, kb), rows(v, ka, kb), heads, mask, biases, rel)
        outs.append(o)
        maps.append(w)
        covered = qb
    if covered != q.shape[0]:
        raise ValueError("query blocks must tile the rows in order")
    return (outs[0] if len(outs) == 1 else nc.concat_rows(outs)), maps


def multihead(q: Tensor, k: Tensor, v: Tensor, heads: int, mask, biases=None, rel=None):
    """Attention over column-split heads; returns concatenated output and mean weights.

    ``rel`` is ``(index, table)`` with the table split across heads like ``v``.
    """
    outs, maps = [], []
    qs, ks, vs = split_cols(q, heads), split_cols(k, heads), split_cols(v, heads)
    tables = split_cols(rel[1], heads) if rel is not None else [None] * heads
    for h in range(heads):
        o, p = nc.attention(qs[h], ks[h], vs[h], mask, None if biases is None else biases[h],
                            None if rel is None else rel[0], tables[h])
        outs.append(o)
        maps.append(p)
    return nc.concat_cols(outs), np.mean(maps, axis=0)

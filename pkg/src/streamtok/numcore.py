"""Dense 2-D tensors with reverse-mode gradients.

Everything in the package is built from the ops in this module.  Data is
row-major ``float32``; the finite-difference oracle temporarily switches the
whole core to ``float64`` so that its numeric derivatives are trustworthy.

Two execution modes matter to callers:

* ``no_grad()`` stops graph recording (inference).
* ``deterministic_kernels()`` swaps BLAS matrix products and row reductions
  for sequential, row-independent kernels.  A row computed inside a small
  chunk is then bit-identical to the same row computed inside a large batch,
  and trailing zero-weight terms never change a sum.  Streaming inference
  relies on this to match offline inference exactly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "ConfigError", "ContractError", "OracleError",
    "tensor", "parameter", "no_grad", "precision", "deterministic_kernels",
    "is_deterministic", "grad_enabled", "current_dtype",
    "matmul", "add", "sub", "mul", "scale", "neg", "tanh", "gelu", "relu",
    "softmax_rows", "log_softmax_rows", "logsumexp_rows", "logsumexp",
    "layernorm", "attention", "causal_attention", "causal_mask", "embedding",
    "gather", "take_rows", "concat_cols", "concat_rows", "sum_all", "mean_all",
    "pick", "cross_entropy", "record", "backward", "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op was configured with invalid static arguments."""


class ContractError(RuntimeError):
    """A caller broke an op's precondition."""


class OracleError(RuntimeError):
    """The finite-difference oracle cannot be trusted for this function."""


_local = threading.local()
_seq = itertools.count()


def _mode(name, default):
    return getattr(_local, name, default)


def current_dtype():
    return _mode("dtype", np.float32)


def grad_enabled() -> bool:
    return _mode("grad", True)


def is_deterministic() -> bool:
    return _mode("det", False)


@contextlib.contextmanager
def _set(name, value, default):
    old = _mode(name, default)
    setattr(_local, name, value)
    try:
        yield
    finally:
        setattr(_local, name, old)


def no_grad():
    return _set("grad", False, True)


def precision(dtype):
    return _set("dtype", np.dtype(dtype).type, np.float32)


def deterministic_kernels(enabled: bool = True):
    return _set("det", enabled, False)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=current_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._seq = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __matmul__ = lambda self, other: matmul(self, other)
    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other) if isinstance(other, Tensor) else scale(self, other)
    __rmul__ = __mul__
    __neg__ = lambda self: neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create an op output; ``backward_fn(grad)`` returns one grad per parent."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


class Graph:
    """Recorded ops reachable from one output, in construction order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def backward(self, out: Tensor, seed: np.ndarray):
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf that requires it; grads accumulate."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    Graph.from_output(loss).backward(loss, np.ones_like(loss.data))


# -- kernels -----------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if is_deterministic():
        # sequential over the inner dimension, each row on its own
        return np.add.reduce(a[:, :, None] * b[None, :, :], axis=1)
    return a @ b


def _rowsum(x: np.ndarray) -> np.ndarray:
    if is_deterministic():
        return np.cumsum(x, axis=-1)[..., -1:]
    return x.sum(axis=-1, keepdims=True)


def _check2d(name: str, *xs: Tensor):
    for x in xs:
        if x.data.ndim != 2:
            raise ShapeError(f"{name} expects 2-D operands, got shape {x.shape}")


# -- elementwise and linear algebra ------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return record(_mm(A, B), (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape sum, or a 1-D bias added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return record(x.data * m, (x,), lambda g: (g * m,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU; smooth, so it survives finite differences."""
    X = x.data
    X2 = X * X
    t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))
    y = 0.5 * X * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return record(y, (x,), bw)


# -- row normalisations ------------------------------------------------------

def _softmax(X: np.ndarray) -> np.ndarray:
    m = X.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(X - m)
    s = _rowsum(e)
    return e / np.where(s > 0, s, 1.0)


def softmax_rows(x: Tensor) -> Tensor:
    _check2d("softmax_rows", x)
    y = _softmax(x.data)
    return record(y, (x,), lambda g: (y * (g - _rowsum(g * y)),))


def logsumexp(X: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp on raw arrays; all -inf rows give -inf."""
    m = np.max(X, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(X - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def logsumexp_rows(x: Tensor) -> Tensor:
    _check2d("logsumexp_rows", x)
    y = logsumexp(x.data)
    p = _softmax(x.data)
    return record(y, (x,), lambda g: (p * g[:, None],))


def log_softmax_rows(x: Tensor) -> Tensor:
    _check2d("log_softmax_rows", x)
    X = x.data
    m = X.max(axis=-1, keepdims=True)
    sh = X - m
    y = sh - np.log(_rowsum(np.exp(sh)))
    p = np.exp(y)
    return record(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check2d("layernorm", x)
    n = x.shape[1]
    if n < 2:
        raise ConfigError(f"layernorm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}, {bias.shape} do not match {n}")
    X = x.data
    mu = _rowsum(X) / n
    xc = X - mu
    var = _rowsum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def bw(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record(xhat * G + bias.data, (x, gain, bias), bw)


# -- attention ---------------------------------------------------------------

def causal_mask(t_q: int, t_k: int | None = None, offset: int = 0) -> np.ndarray:
    """Boolean mask; query i (absolute position offset+i) sees keys <= its position."""
    t_k = t_q + offset if t_k is None else t_k
    return np.arange(t_k)[None, :] <= (np.arange(t_q) + offset)[:, None]


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              bias: Tensor | None = None, rel_index: np.ndarray | None = None,
              rel_values: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with a boolean keep-mask and additive bias.

    With ``rel_index`` (query x key table rows) and ``rel_values`` (a table
    with v's width), every key also contributes the table row of its relative
    position, weighted by its attention probability.

    Returns the output and the attention weights.  Rows whose mask is all
    False produce zero output and zero weights.
    """
    _check2d("attention", q, k, v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if mask is not None and mask.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"attention mask {mask.shape} vs ({q.shape[0]}, {k.shape[0]})")
    if bias is not None and bias.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"attention bias {bias.shape} vs ({q.shape[0]}, {k.shape[0]})")
    if (rel_index is None) != (rel_values is None):
        raise ShapeError("rel_index and rel_values go together")
    if rel_values is not None and (rel_index.shape != (q.shape[0], k.shape[0])
                                   or rel_values.shape[1] != v.shape[1]):
        raise ShapeError(f"relative values {rel_values.shape} / index {rel_index.shape} do not fit")
    if rel_values is not None and rel_index.size and (rel_index.min() < 0 or rel_index.max() >= rel_values.shape[0]):
        raise ShapeError("relative index outside the value table")
    c = 1.0 / np.sqrt(q.shape[1])
    Q, K, V = q.data, k.data, v.data
    s = _mm(Q, np.ascontiguousarray(K.T)) * c
    if bias is not None:
        s = s + bias.data
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    p = _softmax(s)
    out = _mm(p, V)
    parents = [q, k, v]
    if bias is not None:
        parents.append(bias)
    if rel_values is not None:
        R = rel_values.data
        nq, B = p.shape[0], R.shape[0]
        # probability mass per (query, table row); sequential accumulation keeps it deterministic
        flat = (np.arange(nq)[:, None] * B + rel_index).ravel()
        mass = np.bincount(flat, weights=p.ravel(), minlength=nq * B).reshape(nq, B).astype(p.dtype)
        out = out + _mm(mass, R)
        parents.append(rel_values)

    def bw(g):
        dp = g @ V.T
        if rel_values is not None:
            dp = dp + np.take_along_axis(g @ R.T, rel_index, axis=1)
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        grads = [ds @ K * c, ds.T @ Q * c, p.T @ g]
        if bias is not None:
            grads.append(ds)
        if rel_values is not None:
            grads.append(mass.T @ g)
        return grads

    return record(out, tuple(parents), bw), p


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    _check2d("causal_attention", q, k, v)
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"causal attention needs equal lengths, got {q.shape} and {k.shape}")
    return attention(q, k, v, causal_mask(q.shape[0]))[0]


# -- indexing and reshaping ----------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def bw(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        flat = ids.reshape(-1)
        if flat.size:
            order = np.argsort(flat, kind="stable")
            uniq, starts = np.unique(flat[order], return_index=True)
            out[uniq] = np.add.reduceat(g.reshape(flat.size, -1)[order], starts, axis=0).reshape(
                (len(uniq),) + table.shape[1:])
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding ids out of range [0, {rows})")
    return record(table.data[ids], (table,), bw)


take_rows = embedding


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Elementwise gather from a 1-D tensor; output has ``index``'s shape."""
    if x.data.ndim != 1:
        raise ShapeError(f"gather expects a 1-D source, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return record(x.data[index], (x,),
                  lambda g: (np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=n),))


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    _check2d("concat_cols", *xs)
    if len({x.shape[0] for x in xs}) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[x.shape for x in xs]}")
    cuts = np.cumsum([0] + [x.shape[1] for x in xs])
    return record(np.concatenate([x.data for x in xs], axis=1), tuple(xs),
                  lambda g: [g[:, a:b] for a, b in zip(cuts[:-1], cuts[1:])])


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    _check2d("concat_rows", *xs)
    if len({x.shape[1] for x in xs}) != 1:
        raise ShapeError(f"concat_rows column mismatch: {[x.shape for x in xs]}")
    cuts = np.cumsum([0] + [x.shape[0] for x in xs])
    return record(np.concatenate([x.data for x in xs], axis=0), tuple(xs),
                  lambda g: [g[a:b] for a, b in zip(cuts[:-1], cuts[1:])])


def sum_all(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def pick(x: Tensor, cols) -> Tensor:
    """Row-wise selection ``x[i, cols[i]]``."""
    _check2d("pick", x)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, cols] = g
        return (out,)

    return record(x.data[rows, cols], (x,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    _check2d("cross_entropy", logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy targets {targets.shape} vs logits {logits.shape}")
    X = logits.data
    n = X.shape[0]
    m = X.max(axis=1, keepdims=True)
    lse = np.log(np.exp(X - m).sum(axis=1, keepdims=True)) + m
    rows = np.arange(n)
    loss = float((lse[:, 0] - X[rows, targets]).mean()) if n else 0.0

    def bw(g):
        p = np.exp(X - lse)
        p[rows, targets] -= 1.0
        return (p * (g / max(n, 1)),)

    return record(np.asarray(loss), (logits,), bw)


# -- finite-difference oracle ---------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between backward() and central differences of ``f``.

    ``f`` maps a tensor to a tensor; non-scalar outputs are reduced with a
    fixed random projection.  Runs entirely in float64.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    proj = None

    def evaluate(arr, with_grad=False):
        nonlocal proj
        xt = Tensor(arr, requires_grad=with_grad)
        out = f(xt)
        if out.size != 1:
            if proj is None:
                proj = np.random.default_rng(1234).standard_normal(out.shape)
            out = sum_all(mul(out, Tensor(proj)))
        return out, xt

    with precision(np.float64):
        a, _ = evaluate(x0.copy())
        b, _ = evaluate(x0.copy())
        if not np.array_equal(a.data, b.data):
            raise OracleError("function is not deterministic; two forward passes differ")
        out, xt = evaluate(x0.copy(), with_grad=True)
        backward(out)
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)
        flat = x0.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        with no_grad():
            for i in idx:
                plus, minus = flat.copy(), flat.copy()
                plus[i] += eps
                minus[i] -= eps
                fp = evaluate(plus.reshape(x0.shape))[0].item()
                fm = evaluate(minus.reshape(x0.shape))[0].item()
                num = (fp - fm) / (2 * eps)
                ana = analytic.reshape(-1)[i]
                err = abs(ana - num) / (abs(ana) + abs(num) + 1e-8)
                worst = max(worst, err)
    return worst

"""Finite-difference checks for every differentiable op.

Each check builds a small random problem from a seed and compares the
analytic gradient against central differences in float64.  The rounding in
FSQ has no useful numerical derivative, so its check compares the
straight-through gradient with the finite-difference gradient of the
bounded (tanh) path it stands in for.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ctc
from . import numcore as nc
from .fsq import fsq_quantize

THRESHOLD = 1e-3
EPS = 1e-3


def _rand(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _max_over_inputs(inputs: dict, f: Callable[[dict], nc.Tensor]) -> float:
    """Check each named input in turn with the others held fixed."""
    worst = 0.0
    for name in inputs:
        def g(x, name=name):
            vals = {k: (x if k == name else nc.tensor(v)) for k, v in inputs.items()}
            return f(vals)
        worst = max(worst, nc.finite_diff_check(g, inputs[name], EPS))
    return worst


def check_matmul(rng):
    return _max_over_inputs({"a": _rand(rng, 3, 4), "b": _rand(rng, 4, 2)},
                            lambda t: nc.matmul(t["a"], t["b"]))


def check_elementwise(rng):
    x = {"x": _rand(rng, 3, 4), "y": _rand(rng, 3, 4)}
    errs = [_max_over_inputs(x, lambda t: nc.mul(nc.add(t["x"], t["y"]), nc.sub(t["x"], t["y"])))]
    for op in (nc.tanh, nc.gelu):
        errs.append(nc.finite_diff_check(op, x["x"], EPS))
    # keep relu inputs away from the kink
    xr = _rand(rng, 3, 4)
    xr[np.abs(xr) < 0.05] = 0.5
    errs.append(nc.finite_diff_check(nc.relu, xr, EPS))
    return max(errs)


def check_layernorm(rng):
    return _max_over_inputs({"x": _rand(rng, 3, 5), "g": 1 + _rand(rng, 5, scale=0.3),
                             "b": _rand(rng, 5, scale=0.3)},
                            lambda t: nc.layernorm(t["x"], t["g"], t["b"]))


def check_softmax(rng):
    x = _rand(rng, 3, 5)
    return max(nc.finite_diff_check(nc.softmax_rows, x, EPS),
               nc.finite_diff_check(nc.log_softmax_rows, x, EPS),
               nc.finite_diff_check(nc.logsumexp_rows, x, EPS))


def check_attention(rng):
    tq, tk, d, buckets = 4, 6, 3, 5
    mask = nc.causal_mask(tq, tk, offset=tk - tq)
    rel = rng.integers(0, buckets, size=(tq, tk))
    inputs = {"q": _rand(rng, tq, d), "k": _rand(rng, tk, d), "v": _rand(rng, tk, d),
              "bias": _rand(rng, tq, tk, scale=0.5), "rel": _rand(rng, buckets, d, scale=0.5)}

    def f(t):
        out, _ = nc.attention(t["q"], t["k"], t["v"], mask=mask, bias=t["bias"], rel_index=rel,
                              rel_values=t["rel"])
        return out
    return _max_over_inputs(inputs, f)


def check_embedding(rng):
    ids = rng.integers(0, 4, size=7)
    joined = _max_over_inputs({"a": _rand(rng, 2, 3), "b": _rand(rng, 2, 2)},
                              lambda t: nc.concat_rows([nc.concat_cols([t["a"], t["b"]]),
                                                        nc.concat_cols([t["b"], t["a"]])]))
    return max(nc.finite_diff_check(lambda t: nc.embedding(t, ids), _rand(rng, 4, 3), EPS), joined)


def check_ctc_loss(rng):
    T, V = 6, 3
    target = [int(x) for x in rng.integers(0, V, size=2)]
    return nc.finite_diff_check(lambda t: ctc.ctc_loss(nc.log_softmax_rows(t), target), _rand(rng, T, V + 1), EPS)


def check_cross_entropy(rng):
    targets = rng.integers(0, 5, size=4)
    return nc.finite_diff_check(lambda t: nc.cross_entropy(t, targets), _rand(rng, 4, 5), EPS)


def check_fsq_straight_through(rng, levels=(5, 5, 3)):
    """Straight-through gradient of the quantized codes vs. the bounded path's numerical gradient."""
    x = _rand(rng, 4, len(levels), scale=0.8)
    proj = rng.standard_normal(x.shape)
    with nc.precision(np.float64):
        xt = nc.Tensor(x.copy(), requires_grad=True)
        codes, _ = fsq_quantize(xt, levels)
        nc.backward(nc.sum_all(nc.mul(codes, nc.tensor(proj))))
        analytic = xt.grad
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += EPS
        minus[i] -= EPS
        fp = (np.tanh(plus.reshape(x.shape)) * proj).sum()
        fm = (np.tanh(minus.reshape(x.shape)) * proj).sum()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * EPS)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)))


CHECKS: dict[str, Callable] = {
    "matmul": check_matmul,
    "elementwise": check_elementwise,
    "layernorm": check_layernorm,
    "softmax": check_softmax,
    "attention": check_attention,
    "embedding": check_embedding,
    "ctc_loss": check_ctc_loss,
    "cross_entropy": check_cross_entropy,
    "fsq_straight_through": check_fsq_straight_through,
}


def run_suite(seeds=(0, 1, 2), ops=None) -> dict[str, float]:
    """Worst relative error per op over ``seeds``."""
    out = {}
    for name in ops or CHECKS:
        if name not in CHECKS:
            raise nc.ConfigError(f"unknown op {name!r}; choose from {', '.join(CHECKS)}")
        out[name] = max(CHECKS[name](np.random.default_rng(s)) for s in seeds)
    return out

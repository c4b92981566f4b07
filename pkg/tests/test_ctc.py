import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamtok import ctc
from streamtok import numcore as nc
from streamtok.numcore import ContractError


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def loss_of(O, s):
    with nc.precision(np.float64):
        return ctc.ctc_loss(nc.tensor(O), s).item()


def test_single_forced_alignment_costs_nothing():
    O = np.log(np.array([[1.0, 1e-30, 1e-30]]))
    assert loss_of(O, [0]) == pytest.approx(0.0, abs=1e-6)


def test_uniform_three_frames_two_symbols():
    # 27 paths; {0--, -0-, --0, 00-, -00, 000} collapse to [0]
    O = np.log(np.full((3, 3), 1 / 3))
    paths = [p for p in itertools.product(range(3), repeat=3) if ctc.collapse(p, 2) == [0]]
    assert len(paths) == 6
    assert loss_of(O, [0]) == pytest.approx(-np.log(6 / 27), abs=1e-6)


def test_repeat_needs_a_blank():
    O = np.log(np.full((2, 3), 1 / 3))
    assert loss_of(O, [0, 0]) == np.inf
    assert loss_of(O, [0, 1]) < np.inf
    assert ctc.min_frames([0, 0, 1, 1]) == 6


def test_longer_than_input_is_infeasible_in_both():
    O = log_softmax(np.random.default_rng(0).standard_normal((2, 3)))
    assert loss_of(O, [0, 1, 0]) == ctc.brute_force_ctc(O, [0, 1, 0]) == np.inf


def test_tokens_must_be_below_blank():
    with pytest.raises(ContractError):
        loss_of(np.zeros((3, 3)), [2])


def test_brute_force_guard():
    with pytest.raises(ctc.OracleScaleError):
        ctc.brute_force_ctc(np.zeros((11, 4)), [0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10_000))
def test_loss_matches_enumeration(T, V, seed):
    rng = np.random.default_rng(seed)
    O = log_softmax(rng.standard_normal((T, V + 1)) * 2)
    s = [int(x) for x in rng.integers(0, V, size=int(rng.integers(0, T + 1)))]
    ours, ref = loss_of(O, s), ctc.brute_force_ctc(O, s)
    if ref == np.inf:
        assert ours == np.inf
    else:
        assert ours >= 0
        assert abs(ours - ref) < 1e-6


def test_batch_masks_infeasible_items():
    rng = np.random.default_rng(1)
    O = log_softmax(rng.standard_normal((7, 3)))
    loss, per = ctc.ctc_loss_batch(nc.tensor(O), [(0, 4), (4, 5)], [[0, 1], [0, 0]])
    assert per[1] == np.inf
    assert loss.item() == pytest.approx(per[0], rel=1e-5)


def test_ctc_gradient_against_finite_differences():
    rng = np.random.default_rng(2)
    err = nc.finite_diff_check(lambda x: ctc.ctc_loss(nc.log_softmax_rows(x), [0, 2, 1]),
                               rng.standard_normal((5, 4)))
    assert err < 1e-3


def test_greedy_collapse_rule_and_emission_frames():
    a, b, blank = 0, 1, 2
    rows = np.eye(3)[[blank, a, a, blank, b]]
    assert ctc.greedy_decode(np.log(rows + 1e-9)) == ([a, b], [1, 4])
    assert ctc.greedy_decode(np.log(np.eye(3)[[blank] * 4] + 1e-9)) == ([], [])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_greedy_ignores_positive_row_scaling(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((9, 4))
    scaled = x * rng.uniform(0.1, 5.0, size=(9, 1))
    assert ctc.greedy_decode(log_softmax(x)) == ctc.greedy_decode(log_softmax(scaled))


def test_streaming_rows_one_at_a_time_match_offline():
    rng = np.random.default_rng(3)
    for _ in range(100):
        T = int(rng.integers(1, 30))
        O = log_softmax(rng.standard_normal((T, 4)) * 2)
        dec = ctc.StreamingCtcDecoder(3)
        out = []
        for t in range(T):
            out += dec.step(O[t:t + 1], t)
        out += dec.flush()
        toks, frames = ctc.greedy_decode(O)
        assert out == list(zip(toks, frames))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 6), min_size=1, max_size=8))
def test_streaming_any_chunking_matches_offline(seed, sizes):
    rng = np.random.default_rng(seed)
    O = log_softmax(rng.standard_normal((sum(sizes), 3)) * 2)
    dec = ctc.StreamingCtcDecoder(2)
    out, pos = [], 0
    for n in sizes:
        out += dec.step(O[pos:pos + n])
        pos += n
    out += dec.flush()
    assert out == list(zip(*ctc.greedy_decode(O)))


def test_streaming_finalization_points():
    a, blank = 0, 2
    dec = ctc.StreamingCtcDecoder(blank)
    assert dec.step(np.eye(3)[[a]]) == []
    assert dec.pending() == (a, 0)
    assert dec.step(np.eye(3)[[blank]]) == [(a, 0)]
    assert dec.pending() is None


def test_streaming_rejects_out_of_order_rows():
    dec = ctc.StreamingCtcDecoder(2)
    dec.step(np.zeros((2, 3)), 0)
    with pytest.raises(ContractError):
        dec.step(np.zeros((1, 3)), 5)

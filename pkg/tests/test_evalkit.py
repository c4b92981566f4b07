import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamtok import synthcorpus as sc
from streamtok.evalkit import (EvalReport, UtteranceResult, align, aligned_durations, delta_len,
                               duration_consistency, edit_distance, fmt, frame_accuracy, summarize,
                               token_error_rate, units_to_runs)
from streamtok.numcore import ContractError

CFG = sc.CorpusConfig(num_utterances=10)
seqs = st.lists(st.integers(0, 3), max_size=8)


def test_fmt():
    assert fmt(None) == "absent"
    assert fmt(3) == "3" and fmt(np.int64(4)) == "4"
    assert fmt(float("inf")) == "inf"
    assert fmt(1 / 3) == "0.333333"
    assert fmt(1234567.0) == "1.23457e+06"


def test_token_error_rate_cases():
    assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert token_error_rate(["a", "b", "c"], ["a", "c"]) == pytest.approx(1 / 3)
    assert token_error_rate([1], [2, 3, 4]) == 3.0
    with pytest.raises(ContractError):
        token_error_rate([], [1])


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_edit_distance_properties(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert (d == 0) == (a == b)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_alignment_costs_the_edit_distance(a, b):
    pairs = align(a, b)
    assert [i for i, _ in pairs if i is not None] == list(range(len(a)))
    assert [j for _, j in pairs if j is not None] == list(range(len(b)))
    cost = sum(i is None or j is None or a[i] != b[j] for i, j in pairs)
    assert cost == edit_distance(a, b)


def test_duration_consistency_cases():
    assert duration_consistency([3, 4, 5], [3, 4, 5]) == 1.0
    assert duration_consistency([3, 4, 5], [6, 7, 8], tol_frames=2) == 0.0
    assert duration_consistency([3, 4], [5, None], tol_frames=2) == 0.5
    assert duration_consistency([], []) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=8), st.integers(0, 1000))
def test_duration_consistency_shrinks_with_tolerance(ref, seed):
    hyp = list(np.array(ref) + np.random.default_rng(seed).integers(-4, 5, size=len(ref)))
    vals = [duration_consistency(ref, hyp, t) for t in range(6)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert vals == sorted(vals)


def test_aligned_durations_pairs_matching_characters():
    assert aligned_durations([1, 2, 3], [4, 4, 4], [1, 3], [5, 6]) == [5, None, 6]
    assert aligned_durations([1, 2], [3, 3], [1, 7], [3, 3]) == [3, None]


def test_delta_len():
    assert delta_len(list(range(100)), list(range(103))) == 3.0
    assert delta_len([1, 2], [9, 9]) == 0.0
    with pytest.raises(ContractError):
        delta_len([], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=20))
def test_delta_len_of_self_is_zero(x):
    assert delta_len(x, x) == 0.0


def test_units_to_runs_recovers_noiseless_durations():
    corpus = sc.generate_corpus(sc.CorpusConfig(seed=2, num_utterances=20, noise_sigma=0.0))
    for u in corpus.utterances:
        chars, durs = units_to_runs(u.units, corpus.config)
        assert chars == list(u.transcript) and durs == list(u.char_durations)
        got = aligned_durations(u.transcript, u.char_durations, chars, durs)
        assert duration_consistency(u.char_durations, got) == 1.0


def test_units_to_runs_splits_variants_and_drops_silence():
    s = CFG.silence_unit
    chars, durs = units_to_runs([0, 0, 1, s, s, 2, 2, 2], CFG)
    assert chars == [0, 0, 1] and durs == [2, 1, 3]


def test_frame_accuracy():
    assert frame_accuracy([1, 2, 3, 4], [1, 2, 0]) == 0.5
    assert frame_accuracy([1, 2], [1, 2, 3, 4]) == 1.0


def result(i, ter, n_ref, dl=0.0):
    return UtteranceResult(f"u{i}", ter, 0.0, 1.0, dl, 1.0, 1.0, n_ref, 10, False)


def test_summary_is_length_weighted_and_recomputable():
    rs = [result(2, 0.5, 2, dl=4.0), result(1, 0.0, 6, dl=2.0)]
    rep = summarize(rs, "ctc", [np.array([0, 1]), np.array([1])], (5, 5))
    assert rep.ter == pytest.approx(0.5 * 2 / 8)
    assert rep.delta_len_mean == 3.0 and rep.delta_len_std == 1.0
    assert [u.id for u in rep.utterances] == ["u1", "u2"]
    assert rep.codebook_utilization == 2 / 25
    with pytest.raises(ContractError):
        summarize([], "ctc", [], (5, 5))


def test_report_text_and_csv():
    rep = summarize([result(0, 0.25, 4)], "ext", [], (5, 5))
    text = rep.to_text()
    keys = [line.split("=")[0] for line in text.splitlines()]
    assert keys == sorted(EvalReport.SUMMARY_KEYS)
    assert "mode=ext" in text and "utmos=absent" in text and "codebook_utilization=absent" in text
    head, row = rep.to_csv().splitlines()
    assert head.split(",")[0] == "Mode" and row.split(",")[:2] == ["ext", "0.25"]
    table = rep.table().splitlines()
    assert table[0].startswith("id\tter") and table[1].startswith("u0\t0.25")

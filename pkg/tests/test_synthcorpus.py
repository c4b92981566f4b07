import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamtok import synthcorpus as sc
from streamtok.synthcorpus import CorpusConfig, CorpusError


def small(**kw):
    return CorpusConfig(**{"num_utterances": 30, "seed": 3, **kw})


def test_same_seed_gives_identical_corpora():
    a, b = sc.generate_corpus(small()), sc.generate_corpus(small())
    assert np.array_equal(a.templates, b.templates)
    for u, v in zip(a.utterances, b.utterances):
        assert u.transcript == v.transcript
        assert np.array_equal(u.frames, v.frames)
        assert np.array_equal(u.units, v.units)


def test_noiseless_frames_repeat_within_a_character():
    corpus = sc.generate_corpus(small(noise_sigma=0.0))
    for u in corpus.utterances:
        for c, a, d in zip(u.transcript, u.char_starts, u.char_durations):
            block = u.frames[a:a + d]
            assert (block == block[0]).all()
            assert np.array_equal(block[0], corpus.templates[c])


def test_mean_length_of_the_desk_corpus():
    corpus = sc.generate_corpus(CorpusConfig(seed=7, num_utterances=500))
    mean_t = np.mean([u.num_frames for u in corpus.utterances])
    assert 4 * 3 <= mean_t <= 12 * 6
    assert len(corpus.utterances) == 500


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6), st.integers(1, 3))
def test_utterance_bookkeeping(seed, V, variants):
    cfg = CorpusConfig(seed=seed, alphabet_size=V, unit_variants=variants, num_utterances=5)
    for u in sc.generate_corpus(cfg).utterances:
        assert sum(u.char_durations) == u.num_frames == len(u.units)
        assert len(u.transcript) == len(u.char_durations) > 0
        assert all(0 <= c < V for c in u.transcript)
        assert all(a != b for a, b in zip(u.transcript, u.transcript[1:]))
        assert u.units.max() < cfg.unit_vocab
        # every unit decodes back to the character active at its frame
        active = np.repeat(u.transcript, u.char_durations)
        assert [sc.unit_to_char(int(x), cfg) for x in u.units] == list(active)


def test_variants_alternate_per_occurrence():
    units = sc.units_for([0, 1, 0, 1, 0], [1, 1, 1, 1, 1], 2)
    assert list(units) == [0, 2, 1, 3, 0]


def test_units_to_frames_inverts_noiseless_frames():
    cfg = small(noise_sigma=0.0)
    corpus = sc.generate_corpus(cfg)
    for u in corpus.utterances:
        assert np.array_equal(sc.units_to_frames(u.units, corpus.templates, cfg), u.frames)
        assert np.array_equal(sc.frames_to_units(u.frames, corpus.templates, cfg), u.units)
    assert sc.units_to_frames([], corpus.templates, cfg).shape == (0, cfg.feature_dim)


def test_unknown_unit_is_rejected():
    cfg = small()
    corpus = sc.generate_corpus(cfg)
    with pytest.raises(CorpusError):
        sc.units_to_frames([cfg.unit_vocab], corpus.templates, cfg)


def test_concat_longform_arithmetic():
    cfg = small()
    u = sc.generate_corpus(cfg).utterances[0]
    lf = sc.concat_longform([u, u], 2, cfg)
    assert lf.num_frames == 2 * u.num_frames + 2
    assert lf.transcript == u.transcript + u.transcript
    assert list(lf.units[u.num_frames:u.num_frames + 2]) == [cfg.silence_unit] * 2
    assert lf.char_starts[len(u.transcript)] == u.num_frames + 2
    with pytest.raises(CorpusError):
        sc.concat_longform([], 2, cfg)
    with pytest.raises(CorpusError):
        sc.concat_longform([u], 1, cfg)


def test_longform_set_is_about_forty_utterances_long():
    cfg = small(num_utterances=60)
    utts = sc.generate_corpus(cfg).utterances
    lf = sc.make_longform_set(utts, cfg, count=87, k=40)
    assert len(lf) == 87
    base = np.mean([u.num_frames for u in utts])
    ratio = np.mean([x.num_frames for x in lf]) / base
    assert 35 < ratio < 45


def test_config_validation():
    for bad in ({"frames_per_char": (0, 3)}, {"utterance_len": (5, 4)}, {"alphabet_size": 1},
                {"noise_sigma": -1.0}):
        with pytest.raises(CorpusError):
            small(**bad)


def test_config_lines_round_trip():
    cfg = small(frames_per_char=(2, 5), noise_sigma=0.25)
    assert CorpusConfig.from_lines(cfg.to_lines()) == cfg


def test_frame_and_unit_files(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((7, 3)).astype(np.float32)
    sc.write_frames(tmp_path / "a.tsfr", x)
    raw = (tmp_path / "a.tsfr").read_bytes()
    assert raw[:4] == b"TSFR" and len(raw) == 14 + 7 * 3 * 4
    assert np.array_equal(sc.read_frames(tmp_path / "a.tsfr"), x)
    sc.write_units(tmp_path / "a.tsun", [0, 5, 65535])
    assert (tmp_path / "a.tsun").read_bytes()[:4] == b"TSUN"
    assert list(sc.read_units(tmp_path / "a.tsun")) == [0, 5, 65535]
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(CorpusError):
        sc.read_frames(tmp_path / "bad")
    with pytest.raises(CorpusError):
        sc.read_units(tmp_path / "bad")


def test_corpus_directory_round_trip(tmp_path):
    cfg = small(num_utterances=6)
    corpus = sc.generate_corpus(cfg)
    lf = sc.make_longform_set(corpus.utterances, cfg, count=2, k=3)
    sc.write_corpus(corpus, tmp_path)
    sc.write_corpus(corpus, tmp_path, "longform.tsv", lf)
    back = sc.read_corpus(tmp_path)
    assert back.config == cfg
    assert [u.transcript for u in back.utterances] == [u.transcript for u in corpus.utterances]
    lf_back = sc.read_manifest(tmp_path, "longform.tsv")
    assert [u.char_starts for u in lf_back] == [u.char_starts for u in lf]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(lf, lf_back))


def test_split_holds_out_the_tail():
    corpus = sc.generate_corpus(small(num_utterances=20))
    train, test = corpus.split()
    assert len(test) == 2 and test == corpus.utterances[-2:]
    assert len(train) + len(test) == 20


def test_noise_does_not_change_text_or_durations():
    noisy = sc.generate_corpus(small())
    clean = sc.generate_corpus(dataclasses.replace(small(), noise_sigma=0.0))
    for a, b in zip(noisy.utterances, clean.utterances):
        assert a.transcript == b.transcript and a.char_durations == b.char_durations

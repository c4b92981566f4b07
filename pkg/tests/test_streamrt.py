import dataclasses
import time

import numpy as np
import pytest

from streamtok.model import Tokenizer, model_config_for
from streamtok.streamrt import (DONE, INPUT_CHUNK, TOKEN_FINALIZED, UNIT_CHUNK, EventLog, StreamConfig,
                                StreamError, measure, run_stream, stream_decode, stream_encode,
                                stream_longform)
from streamtok.synthcorpus import CorpusConfig
from streamtok.unitdec import generate

CORPUS = CorpusConfig(seed=1, num_utterances=10)


def talkative_model(seed=0, max_units=1):
    cfg = model_config_for(CORPUS, seed=seed)
    cfg = dataclasses.replace(cfg, decoder=dataclasses.replace(cfg.decoder, max_units_per_token=max_units))
    m = Tokenizer(cfg)
    m.enc.ctc.out.weight.data *= 8
    m.enc.ctc.out.bias.data[cfg.encoder.blank] = -2.0
    return m


def frames(T, seed=0):
    return np.random.default_rng(seed).standard_normal((T, CORPUS.feature_dim)).astype(np.float32)


class FakeClock:
    def __init__(self, step=1000):
        self.t, self.step = 0, step

    def __call__(self):
        self.t += self.step
        return self.t


@pytest.mark.parametrize("chunk", [1, 4, 8, 32])
def test_streamed_encode_and_decode_match_offline(chunk):
    m = talkative_model()
    x = frames(45, chunk)
    rec = m.encode(x)
    res = run_stream(m, x, StreamConfig(chunk_frames=chunk))
    assert res.text == rec.tokens
    assert np.array_equal(res.indices, rec.indices)
    assert np.array_equal(res.z, rec.z)
    assert [t.anchor for t in res.tokens] == rec.anchors
    assert res.units == m.decode(rec).units


def test_single_chunk_input_degenerates_to_offline():
    m = talkative_model(1)
    x = frames(20, 1)
    res = run_stream(m, x, StreamConfig(chunk_frames=64))
    assert res.text == m.encode(x).tokens
    assert len(res.log.of(INPUT_CHUNK)) == 1


def test_fcl_is_the_logged_difference():
    m = talkative_model()
    log = EventLog(FakeClock(7))
    res = run_stream(m, frames(40), StreamConfig(chunk_frames=4), log=log)
    first_in, first_out = log.first(INPUT_CHUNK), log.first(UNIT_CHUNK)
    assert first_out is not None
    assert res.report.fcl_ms == (first_out.wall_clock_ns - first_in.wall_clock_ns) / 1e6


def test_events_are_ordered():
    m = talkative_model(2)
    res = run_stream(m, frames(50, 2), StreamConfig(chunk_frames=3))
    ev = res.log.events
    assert all(a.wall_clock_ns <= b.wall_clock_ns for a, b in zip(ev, ev[1:]))
    for kind in (INPUT_CHUNK, TOKEN_FINALIZED, UNIT_CHUNK):
        fr = [e.logical_frame for e in res.log.of(kind)]
        assert fr == sorted(fr)
    assert ev[-1].kind == DONE


def test_clock_going_backwards_is_an_error():
    ticks = iter([5, 3])
    log = EventLog(lambda: next(ticks))
    log.emit(INPUT_CHUNK, 0)
    with pytest.raises(StreamError):
        log.emit(INPUT_CHUNK, 1)


def test_injected_delay_shows_up_in_fcl():
    m = talkative_model()
    x = frames(40)
    cfg = StreamConfig(chunk_frames=4)
    base = run_stream(m, x, cfg).report.fcl_ms
    fired = []

    def delay():
        if not fired:
            fired.append(1)
            time.sleep(0.05)

    fcl = run_stream(m, x, cfg, before_output=delay).report.fcl_ms
    assert 50.0 <= fcl <= 50.0 + 3 * base + 10.0


def test_zero_frames():
    m = talkative_model()
    res = run_stream(m, np.zeros((0, CORPUS.feature_dim), np.float32))
    rep = res.report
    assert rep.rtf_encode is None and rep.rtf_total is None
    assert rep.fcl_ms == float("inf")
    assert res.log.events[-1].kind == DONE


def test_rtf_total_is_the_sum_of_stages():
    m = talkative_model()
    rep = run_stream(m, frames(64)).report
    assert rep.rtf_total == pytest.approx(rep.rtf_encode + rep.rtf_decode, rel=0.05)
    assert rep.rtf_encode >= 0 and rep.fcl_ms >= 0


def test_measure_on_a_hand_built_log():
    log = EventLog(FakeClock(2_000_000))
    log.emit(INPUT_CHUNK, 0)
    log.emit(TOKEN_FINALIZED, 0)
    log.emit(UNIT_CHUNK, 4)
    rep = measure(log, 50, 0.25, 0.75, StreamConfig())
    assert rep.fcl_ms == 4.0
    assert rep.rtf_encode == 0.25 and rep.rtf_total == 1.0
    assert measure(log, 50, 0.25, 0.75, StreamConfig(), TOKEN_FINALIZED).fcl_ms == 2.0


def test_trace_file(tmp_path):
    m = talkative_model()
    res = run_stream(m, frames(30), StreamConfig(chunk_frames=8))
    res.log.write_trace(tmp_path / "t.trace")
    lines = (tmp_path / "t.trace").read_text().splitlines()
    assert len(lines) == len(res.log.events)
    ns, kind, frame, _ = lines[0].split("\t")
    assert kind == INPUT_CHUNK and int(frame) == 0 and int(ns) > 0
    assert lines[-1].split("\t")[1] == DONE


def test_config_errors():
    for kw in ({"chunk_frames": 0}, {"chunk_frames": 8, "window_frames": 4}, {"frame_period_ms": 0.0}):
        with pytest.raises(StreamError):
            StreamConfig(**kw)
    with pytest.raises(StreamError):
        stream_longform(talkative_model(), frames(10), [0], StreamConfig())


def test_source_errors_carry_the_position():
    m = talkative_model()

    def source():
        yield frames(8)
        yield frames(8, 1)
        raise OSError("device gone")

    with pytest.raises(StreamError, match="frame 16"):
        run_stream(m, source())


def test_window_covering_everything_equals_plain_streaming():
    m = talkative_model(3)
    x = frames(40, 3)
    a = run_stream(m, x, StreamConfig(chunk_frames=8))
    b = run_stream(m, x, StreamConfig(chunk_frames=8, window_frames=64))
    assert a.text == b.text and a.units == b.units and np.array_equal(a.indices, b.indices)


def frame_local_model(seed=0):
    """Encoder blocks zeroed so CTC output at a frame depends on that frame alone."""
    m = talkative_model(seed)
    for blk in m.enc.asr.blocks:
        for p in blk.parameters():
            p.data[...] = 0.0
    return m


@pytest.mark.parametrize("W", [8, 12, 24])
def test_windowing_neither_drops_nor_repeats_tokens(W):
    m = frame_local_model()
    x = frames(90, W)
    rec = m.encode(x)
    res = run_stream(m, x, StreamConfig(chunk_frames=4, window_frames=W))
    assert res.text == rec.tokens
    assert [t.anchor for t in res.tokens] == rec.anchors


def test_longform_reports_length_difference():
    m = talkative_model(max_units=2)
    x = frames(60)
    ref = list(range(40))
    out = stream_longform(m, x, ref, StreamConfig(chunk_frames=8, window_frames=32))
    assert out.delta_len == abs(len(out.result.units) - 40) / 40 * 100


def test_stream_encode_reports_token_latency():
    m = talkative_model()
    res = stream_encode(m, frames(30))
    assert res.units == [] and res.report.fcl_ms < float("inf")
    assert res.log.first(UNIT_CHUNK) is None


def test_stream_decode_matches_generate():
    m = talkative_model(max_units=2)
    rec = m.encode(frames(50, 4))
    assert len(rec) >= m.cfg.decoder.N
    res = stream_decode(m, zip(rec.tokens, rec.indices))
    off = generate(m.dec, rec.tokens, m.latents_from_indices(rec.indices))
    assert res.units == off.units
    ev = res.log.events
    inputs = [i for i, e in enumerate(ev) if e.kind in (INPUT_CHUNK, TOKEN_FINALIZED)]
    first_out = next(i for i, e in enumerate(ev) if e.kind == UNIT_CHUNK)
    assert first_out > inputs[m.cfg.decoder.N - 1]
    assert ev[-1].kind == DONE

"""Synthetic speech-like corpus with exact transcripts, durations and units.

Each character owns a fixed template vector; an utterance is a character
string whose characters each last a random number of frames, and every frame
is the character template plus Gaussian noise.  Frame-rate target units are
``char * variants + variant`` where the variant counts how often that
character has already occurred in the utterance.  The last unit id is a
silence unit used only between concatenated segments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

FRAME_MAGIC = b"TSFR"
UNIT_MAGIC = b"TSUN"
FORMAT_VERSION = 1
SILENCE_GAP = 2


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 7
    alphabet_size: int = 8
    feature_dim: int = 16
    frames_per_char: tuple[int, int] = (3, 6)
    noise_sigma: float = 0.1
    utterance_len: tuple[int, int] = (4, 12)
    num_utterances: int = 500
    unit_variants: int = 2

    def __post_init__(self):
        lo, hi = self.frames_per_char
        if lo < 1 or hi < lo:
            raise CorpusError(f"invalid frames_per_char range {self.frames_per_char}")
        lo, hi = self.utterance_len
        if lo < 1 or hi < lo:
            raise CorpusError(f"invalid utterance_len range {self.utterance_len}")
        if self.alphabet_size < 2:
            raise CorpusError("alphabet_size must be at least 2")
        if self.feature_dim < 1 or self.unit_variants < 1 or self.num_utterances < 0:
            raise CorpusError("feature_dim, unit_variants must be positive and num_utterances >= 0")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be nonnegative")

    @property
    def unit_vocab(self) -> int:
        return self.alphabet_size * self.unit_variants + 1

    @property
    def silence_unit(self) -> int:
        return self.unit_vocab - 1

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        return sorted(out)

    @classmethod
    def from_lines(cls, lines) -> "CorpusConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            if key not in types:
                raise CorpusError(f"unknown corpus config key {key!r}")
            if "tuple" in str(types[key]):
                kw[key] = tuple(int(x) for x in val.split())
            elif "float" in str(types[key]):
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)


@dataclass
class Utterance:
    id: str
    transcript: list[int]
    frames: np.ndarray
    units: np.ndarray
    char_durations: list[int]
    char_starts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.char_starts:
            self.char_starts = [int(x) for x in np.cumsum([0] + list(self.char_durations))[:-1]]

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Corpus:
    config: CorpusConfig
    templates: np.ndarray
    utterances: list[Utterance]

    def split(self, holdout_fraction: float = 0.1) -> tuple[list[Utterance], list[Utterance]]:
        """Train / held-out split; the held-out part is the tail of the id order."""
        n_test = max(1, int(round(len(self.utterances) * holdout_fraction)))
        return self.utterances[:-n_test], self.utterances[-n_test:]


def unit_to_char(unit: int, cfg: CorpusConfig) -> int:
    """Character id of a unit, or -1 for silence."""
    if not 0 <= unit < cfg.unit_vocab:
        raise CorpusError(f"unknown unit id {unit}")
    return -1 if unit == cfg.silence_unit else unit // cfg.unit_variants


def units_for(transcript, durations, variants: int) -> np.ndarray:
    seen: dict[int, int] = {}
    out = []
    for c, d in zip(transcript, durations):
        v = seen.get(c, 0)
        seen[c] = v + 1
        out.extend([c * variants + v % variants] * d)
    return np.asarray(out, dtype=np.int64)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus; every utterance uses its own spawned generator.

    Transcripts never repeat a character back to back: frames carry no
    boundary cue, so two adjacent identical characters would be acoustically
    indistinguishable from one long character.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_utterances + 1)
    V, D = cfg.alphabet_size, cfg.feature_dim
    templates = np.random.default_rng(seeds[0]).standard_normal((V, D)).astype(np.float32)
    utts = []
    for i in range(cfg.num_utterances):
        rng = np.random.default_rng(seeds[i + 1])
        n = int(rng.integers(cfg.utterance_len[0], cfg.utterance_len[1] + 1))
        chars = [int(rng.integers(V))]
        while len(chars) < n:
            c = int(rng.integers(V - 1))
            chars.append(c + (c >= chars[-1]))
        durs = [int(d) for d in rng.integers(cfg.frames_per_char[0], cfg.frames_per_char[1] + 1, size=n)]
        per_frame = np.repeat(chars, durs)
        noise = rng.standard_normal((per_frame.size, D)).astype(np.float32) * np.float32(cfg.noise_sigma)
        frames = templates[per_frame] + noise
        utts.append(Utterance(f"utt{i:05d}", chars, frames.astype(np.float32),
                              units_for(chars, durs, cfg.unit_variants), durs))
    return Corpus(cfg, templates, utts)


def units_to_frames(units, templates: np.ndarray, cfg: CorpusConfig) -> np.ndarray:
    """Noiseless synthesis: each unit becomes its character template (silence is zero)."""
    units = np.asarray(units, dtype=np.int64)
    table = np.vstack([templates, np.zeros((1, templates.shape[1]), templates.dtype)])
    if units.size == 0:
        return np.zeros((0, templates.shape[1]), dtype=np.float32)
    if units.min() < 0 or units.max() >= cfg.unit_vocab:
        bad = units[(units < 0) | (units >= cfg.unit_vocab)][0]
        raise CorpusError(f"unknown unit id {bad}")
    chars = np.where(units == cfg.silence_unit, templates.shape[0], units // cfg.unit_variants)
    return table[chars].astype(np.float32)


def nearest_template(frames: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Character id of the closest template per frame; -1 for the zero (silence) frame."""
    table = np.vstack([templates, np.zeros((1, templates.shape[1]), templates.dtype)])
    d = ((frames[:, None, :] - table[None, :, :]) ** 2).sum(-1)
    idx = d.argmin(axis=1)
    return np.where(idx == templates.shape[0], -1, idx)


def frames_to_units(frames: np.ndarray, templates: np.ndarray, cfg: CorpusConfig) -> np.ndarray:
    """Inverse of ``units_to_frames`` on noiseless data (variants recovered from runs)."""
    chars = nearest_template(frames, templates)
    out = np.empty(len(chars), dtype=np.int64)
    seen: dict[int, int] = {}
    prev = None
    for t, c in enumerate(chars):
        if c < 0:
            out[t] = cfg.silence_unit
        else:
            if c != prev:
                seen[c] = seen.get(c, 0) + 1
            out[t] = c * cfg.unit_variants + (seen[c] - 1) % cfg.unit_variants
        prev = c
    return out


def concat_longform(utterances: list[Utterance], k: int, cfg: CorpusConfig,
                    uid: str | None = None) -> Utterance:
    """Join the first ``k`` utterances with a two-frame silence between segments.

    Silence is not part of the transcript, so ``char_durations`` cover only
    characters and ``char_starts`` carry the gaps.
    """
    if not utterances:
        raise CorpusError("concat_longform needs at least one utterance")
    if k < 2:
        raise CorpusError(f"concat_longform needs k >= 2, got {k}")
    if len(utterances) < k:
        raise CorpusError(f"asked for {k} segments but only {len(utterances)} given")
    parts = utterances[:k]
    D = parts[0].frames.shape[1]
    gap_frames = np.zeros((SILENCE_GAP, D), dtype=np.float32)
    gap_units = np.full(SILENCE_GAP, cfg.silence_unit, dtype=np.int64)
    frames, units, transcript, durs, starts = [], [], [], [], []
    offset = 0
    for j, u in enumerate(parts):
        if j:
            frames.append(gap_frames)
            units.append(gap_units)
            offset += SILENCE_GAP
        frames.append(u.frames)
        units.append(u.units)
        transcript.extend(u.transcript)
        durs.extend(u.char_durations)
        starts.extend(s + offset for s in u.char_starts)
        offset += u.num_frames
    return Utterance(uid or "+".join(p.id for p in parts), transcript,
                     np.concatenate(frames), np.concatenate(units), durs, starts)


def make_longform_set(utterances: list[Utterance], cfg: CorpusConfig, count: int = 87,
                      k: int = 40, seed: int = 0) -> list[Utterance]:
    """``count`` longform samples, each ``k`` segments drawn without replacement."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(count):
        pick = rng.choice(len(utterances), size=min(k, len(utterances)), replace=False)
        out.append(concat_longform([utterances[i] for i in pick], len(pick), cfg, uid=f"long{j:03d}"))
    return out


# -- on-disk formats ---------------------------------------------------------

def write_frames(path, frames: np.ndarray):
    frames = np.asarray(frames, dtype="<f4")
    T, D = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<HII", FORMAT_VERSION, T, D))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FRAME_MAGIC:
        raise CorpusError(f"{path}: bad frame magic {raw[:4]!r}")
    ver, T, D = struct.unpack_from("<HII", raw, 4)
    if ver != FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported frame file version {ver}")
    data = np.frombuffer(raw, dtype="<f4", count=T * D, offset=14)
    return data.reshape(T, D).astype(np.float32)


def write_units(path, units):
    units = np.asarray(units)
    if units.size and (units.min() < 0 or units.max() > 0xFFFF):
        raise CorpusError("unit ids must fit in u16")
    with open(path, "wb") as fh:
        fh.write(UNIT_MAGIC + struct.pack("<HI", FORMAT_VERSION, units.size))
        fh.write(units.astype("<u2").tobytes())


def read_units(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != UNIT_MAGIC:
        raise CorpusError(f"{path}: bad unit magic {raw[:4]!r}")
    ver, T = struct.unpack_from("<HI", raw, 4)
    if ver != FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported unit file version {ver}")
    return np.frombuffer(raw, dtype="<u2", count=T, offset=10).astype(np.int64)


def _ints(xs) -> str:
    return " ".join(str(int(x)) for x in xs)


def write_corpus(corpus: Corpus, out_dir, manifest: str = "manifest.tsv",
                 utterances: list[Utterance] | None = None):
    """Write frames/units files plus a tab-separated manifest."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "units").mkdir(parents=True, exist_ok=True)
    (out / "corpus.cfg").write_text("\n".join(corpus.config.to_lines()) + "\n")
    write_frames(out / "templates.tsfr", corpus.templates)
    lines = []
    for u in (corpus.utterances if utterances is None else utterances):
        fp, up = f"frames/{u.id}.tsfr", f"units/{u.id}.tsun"
        write_frames(out / fp, u.frames)
        write_units(out / up, u.units)
        rec = [u.id, _ints(u.transcript), fp, up, _ints(u.char_durations)]
        if u.char_starts != [int(x) for x in np.cumsum([0] + u.char_durations)[:-1]]:
            rec.append(_ints(u.char_starts))
        lines.append("\t".join(rec))
    (out / manifest).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(root, manifest: str = "manifest.tsv") -> list[Utterance]:
    root = Path(root)
    utts = []
    for n, line in enumerate((root / manifest).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (5, 6):
            raise CorpusError(f"{manifest}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        uid, tr, fp, up, du = parts[:5]
        starts = [int(x) for x in parts[5].split()] if len(parts) == 6 else []
        utts.append(Utterance(uid, [int(x) for x in tr.split()], read_frames(root / fp),
                              read_units(root / up), [int(x) for x in du.split()], starts))
    return utts


def read_corpus(root, manifest: str = "manifest.tsv") -> Corpus:
    root = Path(root)
    cfg = CorpusConfig.from_lines((root / "corpus.cfg").read_text().splitlines())
    return Corpus(cfg, read_frames(root / "templates.tsfr"), read_manifest(root, manifest))

"""The full tokenizer: encoder + FSQ bottleneck + unit decoder, and its config."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numcore as nc
from .encoder import AlignedLatents, Encoder, EncoderConfig
from .fsq import FsqBottleneck, FsqConfig
from .nn import Module
from .synthcorpus import CorpusConfig
from .unitdec import DecoderConfig, Generation, UnitDecoder, generate


class ConfigFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fsq: FsqConfig = field(default_factory=FsqConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0

    def to_lines(self) -> list[str]:
        out = [f"model.seed={self.seed}"]
        for name in ("encoder", "fsq", "decoder"):
            sub = getattr(self, name)
            for f in fields(sub):
                v = getattr(sub, f.name)
                v = " ".join(map(str, v)) if isinstance(v, tuple) else v
                out.append(f"{name}.{f.name}={v}")
        return sorted(out)

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        parts: dict[str, dict] = {"encoder": {}, "fsq": {}, "decoder": {}}
        seed = 0
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            group, _, name = key.partition(".")
            if key == "model.seed":
                seed = int(val)
            elif group in parts:
                parts[group][name] = val
        built = {}
        for group, typ in (("encoder", EncoderConfig), ("fsq", FsqConfig), ("decoder", DecoderConfig)):
            kw = {}
            known = {f.name: f for f in fields(typ)}
            for name, val in parts[group].items():
                if name not in known:
                    raise ConfigFormatError(f"unknown key {group}.{name}")
                kw[name] = tuple(int(x) for x in val.split()) if "tuple" in str(known[name].type) else int(val)
            built[group] = typ(**kw)
        return cls(built["encoder"], built["fsq"], built["decoder"], seed)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:16]


def model_config_for(corpus: CorpusConfig, N: int = 2, M: int = 5, seed: int = 0, **decoder_kw) -> ModelConfig:
    enc = EncoderConfig(feature_dim=corpus.feature_dim, vocab=corpus.alphabet_size)
    fsq = FsqConfig(aligned_dim=enc.aligned_dim)
    dec = DecoderConfig(unit_vocab=corpus.unit_vocab, vocab=corpus.alphabet_size,
                        aligned_dim=enc.aligned_dim, N=N, M=M, silence_unit=corpus.silence_unit,
                        max_units_per_token=corpus.frames_per_char[1], **decoder_kw)
    return ModelConfig(enc, fsq, dec, seed)


@dataclass
class TokenRecord:
    """Encoder output for one utterance: text tokens, anchors, FSQ indices, decoder latents."""

    tokens: list[int]
    anchors: list[int]
    indices: np.ndarray | None
    z: np.ndarray

    def __len__(self):
        return len(self.tokens)


class Tokenizer(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.enc = Encoder(cfg.encoder, seed=int(rng.integers(2 ** 31)))
        self.fsq = FsqBottleneck(cfg.fsq, np.random.default_rng(int(rng.integers(2 ** 31))))
        self.dec = UnitDecoder(cfg.decoder, seed=int(rng.integers(2 ** 31)))

    def quantize(self, lat: AlignedLatents, bypass: bool = False) -> tuple[np.ndarray | None, np.ndarray]:
        """FSQ indices and the up-projected latents the decoder consumes."""
        if len(lat) == 0:
            return (None if bypass else np.zeros(0, np.int64)), np.zeros((0, self.cfg.encoder.aligned_dim), np.float32)
        if bypass:
            with nc.no_grad(), nc.deterministic_kernels():
                z, _ = self.fsq(nc.tensor(lat.z), bypass=True)
            return None, z.data.copy()
        ql = self.fsq.quantize(lat.z)
        return ql.indices, ql.z

    def encode(self, frames, transcript_override=None, anchors=None, bypass: bool = False) -> TokenRecord:
        tokens, lat, _ = self.enc.encode(frames, transcript_override, anchors)
        q, z = self.quantize(lat, bypass)
        return TokenRecord(list(tokens), list(lat.anchors), q, z)

    def latents_from_indices(self, indices) -> np.ndarray:
        if len(indices) == 0:
            return np.zeros((0, self.cfg.encoder.aligned_dim), np.float32)
        return self.fsq.dequantize(indices)

    def decode(self, rec: TokenRecord) -> Generation:
        return generate(self.dec, rec.tokens, rec.z)

    def reconstruct(self, frames, transcript_override=None, bypass: bool = False):
        rec = self.encode(frames, transcript_override, bypass=bypass)
        return rec, self.decode(rec)


def with_seed(cfg: ModelConfig, seed: int) -> ModelConfig:
    return replace(cfg, seed=seed)

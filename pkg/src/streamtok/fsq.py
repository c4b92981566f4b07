"""Finite scalar quantization of aligned latents.

Each of the K low-dimensional coordinates is squashed by tanh and rounded to
an odd-sized symmetric grid in [-1, 1]; the product of grid sizes is an
implicit codebook, so there is nothing to learn besides the two projections.
Rounding uses the straight-through convention in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .nn import Linear, Module
from .numcore import ContractError, Tensor


class FsqError(ValueError):
    pass


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = (5, 5, 5, 5)
    aligned_dim: int = 16

    def __post_init__(self):
        if not self.levels:
            raise FsqError("levels must be nonempty")
        for L in self.levels:
            if L < 3 or L % 2 == 0:
                raise FsqError(f"every level must be an odd integer >= 3, got {L}")

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    @property
    def dims(self) -> int:
        return len(self.levels)


def _half(levels) -> np.ndarray:
    return (np.asarray(levels, dtype=np.float64) - 1) / 2


def round_to_grid(b: np.ndarray, levels) -> np.ndarray:
    """Nearest grid value for already bounded inputs in [-1, 1]."""
    h = _half(levels).astype(b.dtype)
    return (np.round(b * h) / h).astype(b.dtype)


@dataclass
class QuantizedLatents:
    codes: np.ndarray
    indices: np.ndarray
    z: np.ndarray | None = None


def fsq_quantize(z_low: Tensor, levels) -> tuple[Tensor, np.ndarray]:
    """Bounded, rounded codes (straight-through) and their integer indices."""
    levels = tuple(int(L) for L in levels)
    if z_low.shape[1] != len(levels):
        raise FsqError(f"expected {len(levels)} latent dims, got {z_low.shape[1]}")
    b = nc.tanh(z_low)
    q = round_to_grid(b.data, levels)
    codes = nc.record(q, (b,), lambda g: (g,))
    return codes, codes_to_indices(q, levels)


def quantize(x: np.ndarray, levels) -> np.ndarray:
    """Forward-only convenience: tanh bound then round."""
    x = np.asarray(x, dtype=np.float32)
    return round_to_grid(np.tanh(x), levels)


def _digits(codes: np.ndarray, levels) -> np.ndarray:
    h = _half(levels)
    scaled = np.asarray(codes, dtype=np.float64) * h
    digits = np.round(scaled)
    if np.any(np.abs(scaled - digits) > 1e-4) or np.any(np.abs(digits) > h):
        raise ContractError("code is not on the quantization grid")
    return (digits + h).astype(np.int64)


def codes_to_indices(codes: np.ndarray, levels) -> np.ndarray:
    codes = np.atleast_2d(codes)
    if codes.shape[1] != len(levels):
        raise ContractError(f"code rows must have {len(levels)} entries")
    idx = np.zeros(codes.shape[0], dtype=np.int64)
    for k, d in enumerate(_digits(codes, levels).T):
        idx = idx * levels[k] + d
    return idx


def indices_to_codes(indices, levels) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    size = int(np.prod(levels))
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ContractError(f"index outside [0, {size})")
    h = _half(levels)
    out = np.zeros((idx.size, len(levels)), dtype=np.float32)
    rest = idx.copy()
    for k in range(len(levels) - 1, -1, -1):
        out[:, k] = ((rest % levels[k]) - h[k]) / h[k]
        rest //= levels[k]
    return out


def code_to_index(code, levels) -> int:
    return int(codes_to_indices(np.asarray(code, dtype=np.float64)[None, :], levels)[0])


def index_to_code(q: int, levels) -> np.ndarray:
    return indices_to_codes([q], levels)[0]


def codebook_utilization(indices, levels) -> float:
    indices = np.asarray(indices).reshape(-1)
    if indices.size == 0:
        raise FsqError("utilization needs at least one index")
    return len(np.unique(indices)) / float(np.prod(levels))


class FsqBottleneck(Module):
    """Down-projection, FSQ, up-projection.  ``bypass`` skips the rounding."""

    def __init__(self, cfg: FsqConfig, rng):
        self.cfg = cfg
        self.down = Linear(rng, cfg.aligned_dim, cfg.dims)
        self.up = Linear(rng, cfg.dims, cfg.aligned_dim)

    def __call__(self, z: Tensor, bypass: bool = False) -> tuple[Tensor, np.ndarray | None]:
        low = self.down(z)
        if bypass:
            return self.up(low), None
        codes, q = fsq_quantize(low, self.cfg.levels)
        return self.up(codes), q

    def quantize(self, z: np.ndarray) -> QuantizedLatents:
        with nc.no_grad(), nc.deterministic_kernels():
            low = self.down(nc.tensor(z))
            codes, q = fsq_quantize(low, self.cfg.levels)
            up = self.up(codes)
        return QuantizedLatents(codes.data.copy(), q, up.data.copy())

    def dequantize(self, indices) -> np.ndarray:
        """Up-projected latents from indices alone (what the decoder receives)."""
        codes = indices_to_codes(indices, self.cfg.levels)
        with nc.no_grad(), nc.deterministic_kernels():
            return self.up(nc.tensor(codes)).data.copy()

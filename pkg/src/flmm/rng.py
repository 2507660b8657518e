"""Deterministic splitmix64 random stream shared by every component.

Corpora, masks, and DP noise must be bit-reproducible across runs and across
machines, so we do not use numpy's Generator. The stream is counter-based:
state_i = seed + i * GOLDEN (mod 2^64), output = mix(state_i), which lets the
bulk paths vectorize.

Hot bulk kernels live in ``_kernels``; set FLMM_NO_NUMBA=1 to force the pure
numpy fallback.
"""

from __future__ import annotations

import math

import numpy as np

from flmm._kernels import bulk_mix, bulk_uniform

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = 0xFFFFFFFFFFFFFFFF

_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 stream with Box-Muller Gaussians."""

    def __init__(self, seed: int):
        self.state = seed & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def next_uniform(self) -> float:
        # 53-bit mantissa in [0, 1)
        return (self.next_u64() >> 11) * 2.0**-53

    def next_gaussian(self) -> float:
        if self._spare is not None:
            g = self._spare
            self._spare = None
            return g
        # Box-Muller; reject u1 == 0 to keep log finite
        u1 = self.next_uniform()
        while u1 == 0.0:
            u1 = self.next_uniform()
        u2 = self.next_uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def uniforms(self, n: int) -> np.ndarray:
        """Vectorized draw of n uniforms; advances the stream by n."""
        out = bulk_uniform(np.uint64(self.state), n)
        self.state = (self.state + n * GOLDEN) & MASK64
        self._spare = None
        return out

    def gaussians(self, n: int) -> np.ndarray:
        """n Gaussians via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = u[0::2]
        u2 = u[1::2]
        u1 = np.where(u1 == 0.0, 2.0**-53, u1)  # cheap guard, p ~ 2^-53
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(ang)
        out[1::2] = r * np.sin(ang)
        return out[:n]

    def normal_matrix(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self.gaussians(rows * cols).reshape(rows, cols) * std

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using the stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


def mix_seed(*parts: int) -> int:
    """Derive a child seed from (seed, round, party-hash, ...) components."""
    acc = 0
    for p in parts:
        acc = _mix((acc + GOLDEN + (p & MASK64)) & MASK64)
    return acc


def hash_text(s: str) -> int:
    acc = 0
    for b in s.encode():
        acc = _mix((acc ^ b) + GOLDEN & MASK64)
    return acc


__all__ = ["SplitMix64", "mix_seed", "hash_text", "bulk_mix", "GOLDEN", "MASK64"]

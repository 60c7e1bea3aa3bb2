"""Deterministic pseudo-random numbers: SplitMix64 stream + Box-Muller normals.

Every random draw in the package flows through :class:`Rng` so that a seed
pins the entire pipeline bit-for-bit, independent of platform. The scalar
stepping is the reference definition; the vectorized paths reproduce it
exactly (SplitMix64's state advances by a constant, so a batch of outputs
is a pure function of the starting state).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = 0xFFFFFFFFFFFFFFFF

# uniform = (word >> 11) * 2**-53, exact in float64
_U53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def mix64(a: int, b: int = 0) -> int:
    """Hash two words into one; used to derive independent named substreams."""
    return _mix((a ^ ((b * _GOLDEN) & _MASK)) & _MASK)


def fnv1a64(s: str) -> int:
    """FNV-1a hash of a UTF-8 string; stable across runs and platforms."""
    h = 0xCBF29CE484222325
    for byte in s.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def named_stream(seed: int, name: str) -> "Rng":
    """Independent substream for a named parameter under a base seed."""
    return Rng(mix64(seed, fnv1a64(name)))


class Rng:
    """SplitMix64 generator with a one-slot cache for Box-Muller pairs."""

    def __init__(self, seed: int):
        self.state = seed & _MASK
        self._gauss_cache: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * _U53
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via floor(u * n); n small vs 2**53."""
        return int((self.next_u64() >> 11) * _U53 * n)

    def normal(self) -> float:
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return z
        u1 = (self.next_u64() >> 11) * _U53
        u2 = (self.next_u64() >> 11) * _U53
        # 1 - u1 is in (0, 1], so the log is finite
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        t = 2.0 * np.pi * u2
        self._gauss_cache = float(r * np.sin(t))
        return float(r * np.cos(t))

    def _u64_block(self, m: int) -> np.ndarray:
        """Next m raw words, vectorized; advances state as m scalar calls."""
        ks = np.arange(1, m + 1, dtype=np.uint64)
        s = np.uint64(self.state) + np.uint64(_GOLDEN) * ks
        z = s
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = int(s[-1])
        return z

    def uniform_array(self, m: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self._u64_block(m) >> np.uint64(11)).astype(np.float64) * _U53
        return lo + (hi - lo) * u

    def normal_array(self, m: int) -> np.ndarray:
        """m standard normals, bit-identical to m calls of :meth:`normal`."""
        out = np.empty(m, dtype=np.float64)
        base = 0
        if m > 0 and self._gauss_cache is not None:
            out[0] = self._gauss_cache
            self._gauss_cache = None
            base = 1
        rem = m - base
        npairs = (rem + 1) // 2
        if npairs > 0:
            words = (self._u64_block(2 * npairs) >> np.uint64(11)).astype(np.float64) * _U53
            u1 = words[0::2]
            u2 = words[1::2]
            r = np.sqrt(-2.0 * np.log(1.0 - u1))
            t = 2.0 * np.pi * u2
            # stream order is cos, sin per pair
            inter = np.empty(2 * npairs, dtype=np.float64)
            inter[0::2] = r * np.cos(t)
            inter[1::2] = r * np.sin(t)
            out[base:] = inter[:rem]
            if rem % 2 == 1:
                self._gauss_cache = float(inter[rem])
        return out


def randn(shape: tuple[int, int, int, int], rng: Rng) -> np.ndarray:
    """I.i.d. standard-normal rank-4 tensor drawn from the rng's stream."""
    if len(shape) != 4 or any(int(d) < 1 for d in shape):
        raise ShapeError(f"randn requires four dims >= 1, got {shape!r}")
    m = 1
    for d in shape:
        m *= int(d)
    out = rng.normal_array(m).reshape(shape)
    if not np.isfinite(out).all():
        raise NumericError("randn produced non-finite values")
    return out

"""Deterministic counter-based random streams (splitmix64).

Every stochastic operation in the package draws from an explicitly passed
``RngStream``. Streams are derived from a root seed and a chain of names, so
the k-th draw of a given stream is a pure function of (seed, names, k) and is
bit-identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK = (1 << 64) - 1
_INV53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; operates elementwise on uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _mix_scalar(z: int) -> int:
    return int(_mix64(np.uint64(z & _MASK)))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


class RngStream:
    """A named splitmix64 stream with an immutable base and a draw counter."""

    __slots__ = ("_base", "_count")

    def __init__(self, base: int):
        self._base = np.uint64(base & _MASK)
        self._count = 0

    @classmethod
    def from_name(cls, seed: int, name: str) -> "RngStream":
        return cls(_mix_scalar((seed & _MASK) ^ _fnv1a64(name)))

    def split(self, name: str) -> "RngStream":
        """Derive a child stream; independent of this stream's draw count."""
        return RngStream(_mix_scalar(int(self._base) ^ _fnv1a64(name) ^ 0xA5A5A5A5A5A5A5A5))

    def _raw(self, n: int) -> np.ndarray:
        ks = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix64(self._base + ks * _GAMMA)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV53
        out = lo + (hi - lo) * u
        return float(out[0]) if size is None else out.reshape(size)

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        # Box-Muller; u1 shifted into (0, 1] so the log is always finite.
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _INV53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = mu + sigma * z
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi). Modulo draw; bias is negligible for hi-lo << 2**64."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        n = 1 if size is None else int(np.prod(size))
        vals = lo + (self._raw(n) % np.uint64(hi - lo)).astype(np.int64)
        return int(vals[0]) if size is None else vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._raw(n), kind="stable")

"""Counter-based random streams and 64-bit hashing.

Everything random in the package is a pure function of a 64-bit key and a
counter, so results never depend on call order across workers. The mixing
function is the SplitMix64 finalizer (Steele, Lea & Flood 2014).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def combine(h: int, x: int) -> int:
    """Fold ``x`` into running hash ``h``."""
    return mix64(h ^ mix64((x + GOLDEN) & MASK64))


def mix64_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    x = (x ^ (x >> _S30)) * _U_M1
    x = (x ^ (x >> _S27)) * _U_M2
    return x ^ (x >> _S31)


def combine_np(h, x) -> np.ndarray:
    h = np.atleast_1d(np.asarray(h, dtype=np.uint64))
    x = np.atleast_1d(np.asarray(x).astype(np.uint64))
    return mix64_np(h ^ mix64_np(x + _U_GOLDEN))


def bits_np(keys, counters) -> np.ndarray:
    """The ``counter``-th SplitMix64 output of the stream seeded by ``key``."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    counters = np.atleast_1d(np.asarray(counters).astype(np.uint64))
    return mix64_np(keys + (counters + np.uint64(1)) * _U_GOLDEN)


def uniforms_np(keys, counters) -> np.ndarray:
    """Uniform doubles in [0, 1) for each (key, counter) pair."""
    return (bits_np(keys, counters) >> _S11).astype(np.float64) * _INV53


def digest_bytes(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def digest_ints(tag: str, values: Iterable[int]) -> int:
    """Stable 64-bit digest of a tag and a sequence of integers."""
    body = ",".join(str(int(v)) for v in values)
    return digest_bytes(f"{tag}:{body}".encode())


def _label_int(label) -> int:
    if isinstance(label, str):
        return digest_bytes(label.encode())
    return int(label) & MASK64


@dataclass
class Stream:
    """A keyed counter-based random stream.

    ``child`` derives an independent stream; the draw methods advance
    ``counter``. Two streams with equal (key, counter) produce equal draws.
    """

    key: int
    counter: int = 0

    @classmethod
    def from_seed(cls, seed: int) -> "Stream":
        return cls(combine(0x5EED, int(seed) & MASK64))

    def child(self, *labels) -> "Stream":
        h = self.key
        for label in labels:
            h = combine(h, _label_int(label))
        return Stream(h)

    def uniform(self) -> float:
        u = float(uniforms_np(self.key, self.counter)[0])
        self.counter += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = uniforms_np(np.full(n, self.key, dtype=np.uint64), np.arange(self.counter, self.counter + n))
        self.counter += n
        return out

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def choice(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w) / w.sum()
        return min(int(np.searchsorted(cdf, self.uniform(), side="right")), len(w) - 1)

    def bits64(self) -> int:
        b = int(bits_np(self.key, self.counter)[0])
        self.counter += 1
        return b

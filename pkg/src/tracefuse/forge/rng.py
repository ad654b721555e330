"""xoshiro256** generator seeded through splitmix64.

All data generation draws from this generator so that a seed maps to the
same bytes on every platform.  Conversions:

* uniform double: ``(x >> 11) * 2**-53`` in [0, 1)
* normal: Box-Muller on consecutive uniform pairs, ``u1`` mapped to (0, 1]
* bounded integer in [lo, hi): ``lo + floor(u * (hi - lo))``

Reference vectors (see tests): splitmix64 seeded with 1234567 yields
6457827717110365317, 3203168211198807973, ...; xoshiro256** with state
(1, 2, 3, 4) yields 11520, 0, 1509978240, 1215971899390074240, ...
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.size):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Xoshiro256:
    def __init__(self, seed: int = 0, state=None):
        if state is not None:
            self.state = np.array(state, dtype=np.uint64)
            if self.state.shape != (4,) or not self.state.any():
                raise ValueError("xoshiro state must be four words, not all zero")
        else:
            x = int(seed) & MASK64
            words = []
            for _ in range(4):
                x, z = splitmix64(x)
                words.append(z)
            self.state = np.array(words, dtype=np.uint64)

    def derive(self, *keys: int) -> "Xoshiro256":
        """Independent child stream keyed by ``keys`` (does not advance self)."""
        x = int(self.state[0]) ^ int(self.state[2])
        for k in keys:
            x, z = splitmix64(x ^ (int(k) & MASK64))
            x = z
        return Xoshiro256(x)

    def next_u64(self, n: int = 1) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill(self.state, out)
        return out

    def random(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, lo: float, hi: float, size=None):
        u = self.random(size)
        return lo + (hi - lo) * u

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        u = self.random(size)
        if size is None:
            return lo + int(u * (hi - lo))
        return lo + np.floor(u * (hi - lo)).astype(np.int64)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = loc + scale * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def choice(self, n: int) -> int:
        return self.integers(0, n)

    def get_state(self) -> np.ndarray:
        return self.state.copy()

"""Deterministic counter-based random streams.

Every stochastic piece of the package draws from a SeededRng so that runs are
bit-reproducible across platforms. The generator is SplitMix64 used in counter
mode: draw i of stream (seed, stream_id) is a pure function of those three
integers, which makes stream splitting trivial and keeps parallel sweep cells
independent of execution order.
"""
from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
# offset of the root stream; an arbitrary odd constant
_ROOT = 0x243F6A8885A308D3


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def mix_words(*words: int) -> int:
    """Hash a sequence of integers into one 64-bit value (order sensitive)."""
    acc = _ROOT
    for w in words:
        acc = mix64((acc + _GAMMA) ^ (w & _MASK64))
    return acc


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
        return z ^ (z >> np.uint64(31))


class SeededRng:
    """A splittable deterministic stream of uniforms and normals.

    Identical (seed, stream_id, call sequence) produce identical outputs on
    every platform; `split` derives an independent child stream from integer
    labels without disturbing this stream's state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = seed & _MASK64
        self.stream_id = stream_id & _MASK64
        self._key = mix_words(self.seed, self.stream_id)
        self._counter = 0

    def split(self, *labels: int) -> "SeededRng":
        return SeededRng(self.seed, mix_words(self.stream_id, *labels))

    def _raw(self, count: int) -> np.ndarray:
        base = np.uint64(self._key)
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            states = base + idx * np.uint64(_GAMMA)
        return _mix64_array(states)

    def uniforms(self, count: int) -> np.ndarray:
        """count doubles strictly inside (0, 1), uniform on a 2^53 lattice."""
        bits = self._raw(count) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * (2.0 ** -53)

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, count: int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        """count Box-Muller normal draws with the given mean and stddev."""
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = (2.0 * math.pi) * u[pairs:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return mean + stddev * z

    def integer(self, bound: int) -> int:
        """One integer in [0, bound); exactly unbiased when bound divides 2^53."""
        return min(int(self.uniform() * bound), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniforms(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), unsorted."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]

"""Deterministic pseudorandom numbers for reproducible experiments.

The generator is splitmix64: the state is ``seed + counter * GOLDEN`` and the
output is an avalanche finalizer of that state.  Because each draw depends
only on its index, whole blocks vectorize with numpy uint64 arithmetic and the
stream is bit-identical across platforms.  Normal variates come from the
Box-Muller transform (two uniforms per pair of normals, no cached state).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF
# 53-bit mantissa scale: uniforms live on the grid k * 2^-53 in [0, 1).
_INV_2_53 = 2.0 ** -53


class RngState:
    """splitmix64 stream; identical seed (and draw order) => identical stream."""

    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & _U64_MASK)
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words, advancing the counter."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = self.seed + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else u[0]

    def uniform_range(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.uniform(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Normal draws via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self._raw(2 * pairs)
        u1 = 1.0 - (u[:pairs] >> np.uint64(11)).astype(np.float64) * _INV_2_53  # (0, 1]
        u2 = (u[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else z[0]

    def integers(self, bound: int, shape=()) -> np.ndarray:
        """Integer draws in [0, bound).

        Maps 53-bit uniforms through floor(u * bound); the modulo bias is
        below 2^-40 for any bound this toolkit uses.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        u = self.uniform(shape)
        return np.minimum((u * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def fork(self, tag: int) -> "RngState":
        """Independent child stream derived from (seed, tag).

        Used to give substreams (init / dropout / shuffling) their own
        counters so that adding draws to one does not shift the others.
        """
        with np.errstate(over="ignore"):
            z = self.seed + np.uint64((int(tag) + 1) & _U64_MASK) * _MIX1
            z = (z ^ (z >> np.uint64(30))) * _GOLDEN
        return RngState(int(z))

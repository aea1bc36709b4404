"""
Seeded random streams.

Every consumer of randomness draws from a NoiseStream whose 64-bit seed is
derived with SplitMix64 from a root seed and a tuple of integer keys, for
example (epoch, batch, sample). Changing the number of samples or the batch
order therefore never silently reuses draws from another stream.

The bit generator is numpy's PCG64. Gaussian draws use the Box-Muller
transform on consecutive uniforms so the mapping from uniforms to normals is
fixed by this module rather than by the numpy version.
"""

from typing import Sequence, Tuple, Union

import numpy as np

MASK64 = (1 << 64) - 1

# Stream namespaces; the first key of every derived stream.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_NOISE = 3
STREAM_ATTACK = 4
STREAM_SYNTH = 5
STREAM_SPLIT = 6
STREAM_CORRUPTION = 7
STREAM_ENSEMBLE = 8
STREAM_ANALYSIS = 9

Shape = Union[int, Sequence[int]]


def splitmix64(state: int) -> Tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(root: int, *keys: int) -> int:
    """Mix a root seed and integer keys into a 64-bit stream seed."""
    state, out = splitmix64(int(root) & MASK64)
    for key in keys:
        state, out = splitmix64(out ^ (int(key) & MASK64))
    return out


class NoiseStream:
    """
    Deterministic random stream.

    Attributes:
        seed: The derived 64-bit seed of this stream
    """

    def __init__(self, root: int, *keys: int):
        self.seed = derive_seed(root, *keys)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "NoiseStream":
        """Independent sub-stream keyed off this stream's seed."""
        return NoiseStream(self.seed, *keys)

    def uniform(self, size: Shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws on [low, high)."""
        return low + (high - low) * self._generator.random(size)

    def normal(self, size: Shape) -> np.ndarray:
        """Standard normal draws via Box-Muller on consecutive uniforms."""
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self._generator.random(2 * pairs).reshape(pairs, 2)
        # 1 - u lies in (0, 1], keeping the log finite
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count].reshape(shape)

    def rademacher(self, size: Shape) -> np.ndarray:
        return np.where(self._generator.random(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def integers(self, low: int, high: int, size: Shape) -> np.ndarray:
        return self._generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"NoiseStream(seed={self.seed:#018x})"

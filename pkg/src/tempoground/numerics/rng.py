"""Counter-based random number generation with explicit state.

Every stream is fully described by (seed, counter): drawing advances only
the counter, and child streams are derived by hashing the parent seed with
a string label. Identical seeds therefore reproduce identical values
across runs and platforms, and evaluation-side draws can never perturb a
training stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Each draw reserves this much Philox counter headroom so consecutive
# draws from one Rng can never overlap no matter how large the request.
_DRAW_STRIDE = 1 << 40


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixing function."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix_label(seed: int, label: str) -> int:
    h = splitmix64(seed & _MASK64)
    for byte in label.encode("utf-8"):
        h = splitmix64(h ^ byte)
    return h


class Rng:
    """Deterministic stream keyed by a 64-bit seed with a draw counter."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def child(self, label: str) -> "Rng":
        """Derive an independent stream from a string label."""
        return Rng(_mix_label(self.seed, label))

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed)
        bitgen.advance(self.counter * _DRAW_STRIDE)
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, shape: tuple[int, ...] | int = (), scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, size=shape)

    def uniform(self, shape: tuple[int, ...] | int = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Uniform integers in [low, high), like numpy's Generator.integers."""
        return self._generator().integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)

    def categorical(self, probs: np.ndarray) -> int:
        """Draw one index from a normalized probability vector."""
        u = float(self._generator().uniform(0.0, 1.0))
        cdf = np.cumsum(probs)
        return int(np.searchsorted(cdf, u * cdf[-1], side="right").clip(0, len(probs) - 1))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

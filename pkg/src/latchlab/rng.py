"""Path-keyed random streams.

A stream is identified by ``(base_seed, path)``. Samples depend only on that
key, never on the order in which streams are created or consumed, so sweeps
and trials can be scheduled in any order and still reproduce bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomStream:
    base_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_seed", int(self.base_seed) & _MASK64)
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if any(p < 0 for p in self.path):
            raise ValueError(f"stream path entries must be non-negative, got {self.path}")

    def child(self, *indices: int) -> "RandomStream":
        return RandomStream(self.base_seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        """Fresh counter-based generator for this key.

        Every call returns a generator positioned at the start of the stream.
        """
        seq = np.random.SeedSequence(entropy=self.base_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def uniforms(self, shape) -> np.ndarray:
        return self.generator().random(shape)

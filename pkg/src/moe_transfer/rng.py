"""Deterministic splittable random streams.

Thin wrapper over numpy's ``SeedSequence``/``Generator`` pair: the same
seed always reproduces the same stream, and :meth:`Rng.split` spawns
statistically independent child streams deterministically, so Monte-Carlo
work can fan out without any ambient entropy.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng", "DEFAULT_SEED"]

DEFAULT_SEED = 42


class Rng:
    """One random stream plus the ability to split off child streams.

    Splitting advances the spawn counter, so two consecutive ``split``
    calls yield distinct children; reconstructing from the same seed and
    replaying the same call sequence reproduces everything bit for bit.
    """

    def __init__(self, seed: int | np.random.SeedSequence = DEFAULT_SEED) -> None:
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if seed < 0:
                raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.default_rng(self._seq)

    @property
    def seed(self) -> tuple[int, ...]:
        entropy = self._seq.entropy
        return tuple(entropy) if isinstance(entropy, (list, tuple)) else (int(entropy),)

    def split(self, k: int) -> list["Rng"]:
        """Spawn ``k`` independent child streams."""
        if k < 1:
            raise ValueError(f"split count must be >= 1, got {k}")
        return [Rng(child) for child in self._seq.spawn(k)]

    def __repr__(self) -> str:
        return f"Rng(entropy={self._seq.entropy!r}, spawn_key={self._seq.spawn_key!r})"

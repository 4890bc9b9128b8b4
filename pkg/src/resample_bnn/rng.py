"""Deterministic RNG substream derivation.

All stochastic code takes an explicit ``numpy.random.Generator``. Substreams
are derived from (seed, *keys) via ``SeedSequence`` spawn keys, so parallel
consumers (MC draws, per-image generation) stay reproducible regardless of
scheduling.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the (seed, keys...) substream; same args -> same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=tuple(int(k) for k in keys)))


def fold_seed(seed: int, *keys: int) -> int:
    """Collapse (seed, keys...) into one integer seed, collision-resistant."""
    state = np.random.SeedSequence(entropy=int(seed),
                                   spawn_key=tuple(int(k) for k in keys))
    lo, hi = state.generate_state(2, dtype=np.uint64)
    return int(lo) ^ (int(hi) << 1)


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    """+-1 signs, P(+1) = 1/2, as float64."""
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

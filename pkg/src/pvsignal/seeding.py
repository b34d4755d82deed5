"""Deterministic seed derivation for replicated stochastic work.

Replicate b of a run always draws from seed ``derive_seed(base_seed, b)``,
so results are independent of scheduling and worker count.
"""

from __future__ import annotations

import numpy as np


def derive_seed(base_seed: int, index: int) -> int:
    """Stable per-replicate seed, mixed through SeedSequence."""
    if base_seed < 0 or index < 0:
        raise ValueError("base_seed and index must be nonnegative")
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(base_seed: int, index: int = 0) -> np.random.Generator:
    """Generator for replicate `index` of a run seeded with `base_seed`."""
    return np.random.default_rng(derive_seed(base_seed, index))


def counter_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by `seed`.

    The k-th variate of the stream is a pure function of (seed, k), which
    is what makes cell-indexed draws reproducible under any schedule.
    """
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))

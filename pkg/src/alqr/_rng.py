"""Seed derivation and random streams.

Every random stream in the package is a Philox4x64 generator keyed directly
by a 64-bit seed (no SeedSequence hashing), and child seeds are derived with
the SplitMix64 finalizer. Both are fixed so results can be reproduced from
``(master_seed, replication, fold, ...)`` alone.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x):
    """SplitMix64 finalizer on a Python int, returns an int in [0, 2**64)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *keys):
    """Mix a seed with a sequence of integer keys into a new 64-bit seed.

    ``derive_seed(s, r)`` depends only on ``(s, r)``, so replication ``r`` of a
    Monte Carlo run never depends on which replications ran before it.
    """
    h = splitmix64(int(seed) & MASK64)
    for k in keys:
        h = splitmix64(h ^ (int(k) & MASK64))
    return h


def make_rng(seed):
    """Philox4x64 generator keyed by a 64-bit seed."""
    key = np.array([int(seed) & MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

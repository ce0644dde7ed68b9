"""Deterministic random number generation.

Every stochastic piece of the library draws from a counter-based Philox
generator, so a seed fully determines the value stream and independent
child streams can be split off without correlating with the parent.
"""

import numpy as np


def make_rng(seed):
    """Counter-based generator: same seed -> bit-identical value stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed, n):
    """Split `n` independent child generators off one seed.

    Child i is a fixed function of (seed, i), so adding consumers later
    never shifts the streams of existing ones.
    """
    children = np.random.SeedSequence(int(seed)).spawn(int(n))
    return [np.random.Generator(np.random.Philox(child)) for child in children]

"""Seeded random streams.

Every generator is a PCG64 bit generator keyed by a ``SeedSequence`` built from
``(seed, *stream)``; distinct stream tuples give statistically independent
sub-streams of one seed.
"""

import numpy as np

# stream ids
ENCODER = 1
DECODER = 2
BATCH = 3
SAMPLER = 4
EVAL = 5
DATA = 6


def make_rng(seed, *stream) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *map(int, stream)])))

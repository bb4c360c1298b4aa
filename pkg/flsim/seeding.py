"""Seeded random streams.

Every stream is derived from the experiment seed plus a purpose tag and the
(round, client, layer) coordinates it serves, so concurrent workers draw the
same numbers no matter which order they run in.
"""
from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    INIT = 0
    DATA = 1
    SUBSAMPLE = 2
    SPLIT = 3
    TRAIN = 4
    CHANNEL = 5
    HESSIAN = 6


def stream(seed: int, purpose: Purpose, *keys: int) -> np.random.Generator:
    """Return an independent generator for (seed, purpose, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), *map(int, keys)]))

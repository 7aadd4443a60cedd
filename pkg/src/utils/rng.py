"""
Seeded random streams.

Every random draw in a run comes from a generator keyed by
(run seed, purpose, *indices), so results do not depend on the order in
which clients are scheduled on the worker pool.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Purposes of the independent random streams of a run."""

    PERMUTATION = 1
    CATEGORY_MEANS = 2
    TRAIN_DATA = 3
    TEST_DATA = 4
    MODEL_INIT = 5
    SHUFFLE = 6
    BUFFER = 7
    CENTRALIZED = 8


def stream(seed: int, purpose: Stream, *indices: int) -> np.random.Generator:
    """
    Build an independent generator for one purpose.

    Args:
        seed: Run seed
        purpose: Stream purpose tag
        *indices: Extra non-negative keys (client, round, category, ...)

    Returns:
        numpy Generator seeded from the full key
    """
    key = [int(seed), int(purpose)] + [int(i) for i in indices]
    return np.random.default_rng(np.random.SeedSequence(key))

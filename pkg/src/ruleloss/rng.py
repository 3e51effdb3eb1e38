"""Named, independent random streams derived from an integer seed."""

from __future__ import annotations

from enum import IntEnum

import numpy as np

DEFAULT_SEEDS = (1024, 1025, 1026, 1027, 1028)


class Purpose(IntEnum):
    INIT = 0
    SHUFFLE = 1
    DROPOUT = 2
    NOISE = 3
    SYNTH = 4
    SPLIT = 5


def random_stream(seed: int, purpose: Purpose | str, *keys: int) -> np.random.Generator:
    """Generator for ``(seed, purpose, *keys)``.

    Distinct label tuples map to distinct ``SeedSequence`` entropy, so streams
    are independent and each is reproducible on its own.
    """
    if isinstance(purpose, str):
        purpose = Purpose[purpose.upper()]
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), *map(int, keys)]))

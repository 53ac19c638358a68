"""
Named random substreams.

Every random draw in a run derives from one integer seed. Consumers ask for a
named stream ("data", "init", "shuffle", ...) plus optional integer indices, so
that e.g. example 17 of the test split always receives the same generator no
matter how generation is scheduled.
"""
import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return an independent generator for (seed, name, *index)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), _name_key(name), *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))

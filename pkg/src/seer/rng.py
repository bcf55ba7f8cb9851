"""Named random sub-streams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])

"""Counter-based random streams.

Every random draw in the package comes from a Philox-4x64 generator whose
key is derived (via ``numpy.random.SeedSequence``) from the integer tuple
``(seed, crc32(tag), *counters)``.  Streams therefore depend only on their
labels, never on scheduling or on how many draws other streams made, and
are reproducible across platforms for a fixed NumPy bit-generator spec.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *counters: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())] + [int(c) for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

"""Seeded random streams.

Every draw in the package comes from ``numpy.random.Generator`` (PCG64) seeded
by ``SeedSequence([seed, crc32(purpose), index])``.  The triple
``(seed, purpose, index)`` therefore fully determines a stream, independently
of the order in which other streams are consumed, which is what makes
per-sample generation order-independent.
"""

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), purpose_code(purpose), int(index)])
    return np.random.Generator(np.random.PCG64(ss))

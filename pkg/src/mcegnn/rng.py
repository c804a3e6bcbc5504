"""Seeded random streams.

All randomness goes through numpy's Philox-4x64 counter-based generator.
A stream is keyed by ``(seed, name)``: the name is hashed with CRC-32 into
the seed sequence's spawn key, so data generation, weight initialization
and shuffling draw from independent streams even when they share a seed.
"""
import zlib

import numpy as np

STREAMS = ("data", "init", "shuffle", "randn", "equicheck", "probe")


def stream(seed, name, *extra):
    """Return a ``numpy.random.Generator`` for the named stream.

    Extra integers (e.g. a layer or trial index) further split the stream.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))

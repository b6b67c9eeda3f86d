"""Seeded generators.

All generation paths use numpy's PCG64 bit generator (PCG-XSL-RR 128/64),
whose output stream is fixed across platforms and numpy releases. Seeds are
expanded from ``(seed, *keys)`` through ``SeedSequence``; string keys are
hashed with CRC-32 so derived streams never depend on Python's salted
``hash``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def generator(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(master seed, purpose tag,
index)``, so the numbers a batch sees depend only on those three values and
never on scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFF


def stream(seed: int, index: int = 0, tag: str = "") -> np.random.Generator:
    """Independent generator for ``(seed, tag, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    hi = int(seed) & _MASK64
    lo = ((_tag_code(tag) << 40) | (int(index) & ((1 << 40) - 1))) & _MASK64
    return np.random.Generator(np.random.Philox(key=(hi << 64) | lo))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an int seed, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0)
    return stream(int(rng))

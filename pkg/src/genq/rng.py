"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`stream`, which keys a
counter-based Philox generator by a root seed plus a path of integers or
strings. Distinct paths give independent streams; nothing reads global state.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little")
    return int(part) & _MASK64


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``."""
    words = [_word(seed)] + [_word(p) for p in path]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


def derive(seed: int, *path: int | str) -> int:
    """Derive a child 64-bit seed from a parent seed and a path."""
    return int(stream(seed, *path).integers(0, 2**63, dtype=np.int64))

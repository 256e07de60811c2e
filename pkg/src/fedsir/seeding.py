"""Deterministic RNG streams keyed by (seed, purpose, ...)."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"RNG key parts must be non-negative, got {part}")
    return int(part)


def derive_rng(seed: int, *parts: int | str) -> np.random.Generator:
    """Return a generator whose stream depends only on ``seed`` and ``parts``.

    Independent streams per purpose mean that consuming randomness in one place
    (say, training a noisy client) never shifts the draws seen elsewhere.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(p) for p in parts)]))

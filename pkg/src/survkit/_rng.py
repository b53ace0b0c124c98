"""Derived random streams.

Every randomized stage draws from a stream keyed by (global seed, a stable
string key). Streams for different keys are statistically independent, and a
stream's output never depends on how many other streams were consumed, so
work items can run in any order (or in parallel) and still produce the bytes
a sequential run would.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *key_parts: object) -> np.random.Generator:
    """Return a Generator for (seed, key). Stable across runs and platforms.

    The key is hashed with SHA-256 (never Python's randomized hash()) so the
    same (seed, key) pair always yields the same stream.
    """
    digest = hashlib.sha256("\x1f".join(str(p) for p in key_parts).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])))

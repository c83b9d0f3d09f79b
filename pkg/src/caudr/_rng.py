"""Deterministic named RNG streams.

One experiment seed fans out into independent streams ("init", "shuffle",
"pairing", ...) so that toggling one consumer (e.g. disabling augmentation)
does not shift the random numbers seen by the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the given (seed, stream name) pair.

    The stream key is derived from a stable digest of the name, so the
    mapping is identical across processes and platforms.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))

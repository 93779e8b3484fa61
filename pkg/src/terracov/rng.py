"""Named, counter-based random streams.

Every random draw in the package comes from ``substream(seed, *keys)``: a
Philox generator keyed by the run seed and a path of names or integers such as
``("train", "dropout", epoch, batch, layer)``. Streams with different keys are
independent and each is reproducible on its own.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))

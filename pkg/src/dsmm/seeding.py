"""Named deterministic RNG streams.

A single user-facing seed fans out into independent named streams
(train / augment / noise / grm / ...) so each component can be reproduced
in isolation. Stream identity is derived from a stable hash of the name,
never from Python's randomized ``hash``.
"""

import hashlib

import numpy as np


def stream(seed, name, *indices):
    """Return a Generator for the (seed, name, *indices) stream.

    Identical arguments always produce an identical generator state,
    across processes and platforms.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, indices)]))

"""Counter-based randomness with reproducible substreams.

Every sample path gets its own Philox generator keyed by
``(seed, path_index)``, so path i's noise does not depend on how paths
are chunked across workers.  Derived seeds (one per grid point) come
from a splitmix64 hash of the base seed and the point index.
"""

from __future__ import annotations

import numpy as np

__all__ = ["splitmix64", "path_generator", "derived_seed"]

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """One splitmix64 scrambling round (the standard finalizer)."""
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Philox generator for one path, keyed by (seed, path_index)."""
    key = np.array([seed & _MASK, path_index & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derived_seed(seed: int, index: int) -> int:
    """Independent 64-bit seed for substream ``index`` (e.g. a grid point)."""
    return splitmix64((seed & _MASK) ^ splitmix64(index & _MASK))

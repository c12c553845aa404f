"""Counter-based random streams, stable across platforms.

All dataset generation and sampling randomness flows through Philox
streams keyed by small integers, so any subset of a larger job (one
label, one image) can be reproduced in isolation and the bit streams
match across operating systems and word sizes.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator over a Philox stream keyed by (seed, *key).

    Key components must be non-negative integers. The mapping from
    (seed, key) to the Philox key goes through SeedSequence, whose
    hashing is platform-independent and version-stable in numpy.
    """
    if any(k < 0 for k in key):
        raise ValueError(f"stream key components must be non-negative, got {key}")
    ss = np.random.SeedSequence(entropy=[int(seed) & ((1 << 64) - 1), *map(int, key)])
    return np.random.Generator(np.random.Philox(seed=ss))

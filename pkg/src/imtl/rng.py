"""Deterministic random streams.

All randomness in the package flows through here. Streams are numpy
Generators backed by PCG64, which is platform independent: the same
(seed, key) pair yields the same draw sequence on any machine. Each
consumer (weight init, dataset sampling, arbitration, minibatch draws)
gets its own key so adding draws to one consumer never perturbs another.
"""

from __future__ import annotations

import numpy as np

# Fixed stream keys. Per-task streams append the task index to the base key.
INIT = 0
DATA = 1
ARBITRATION = 2
MINIBATCH = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the PCG64 generator for a (seed, key) pair."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))

"""Counter-based seed derivation.

Every random decision in the package flows from one top-level seed. Child
streams are keyed by a purpose tag plus integer counters, so independent
components (epoch shuffling, negative sampling, noise draws, ...) never
share a stream and re-running any component with the same inputs replays
the same randomness.
"""

import zlib

import numpy as np


def child_seed(seed: int, tag: str, *counters: int) -> int:
    """Derive a stable 63-bit child seed from (seed, tag, counters)."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]
    entropy.extend(int(c) & 0xFFFFFFFF for c in counters)
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def spawn_rng(seed: int, tag: str, *counters: int) -> np.random.Generator:
    """Generator seeded by :func:`child_seed` of the same arguments."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, tag, *counters)))

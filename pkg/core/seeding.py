# core/seeding.py
"""Named, reproducible random streams. Every random draw in the simulator goes through here."""
import zlib

import numpy as np


def stable_hash(text: str) -> int:
    """Process-independent 32-bit hash of a string (Python's hash() is salted per process)."""
    return zlib.crc32(str(text).encode("utf-8"))


def rng_for(*parts) -> np.random.Generator:
    """Generator seeded from a tuple of non-negative ints and/or strings."""
    entropy = [p if isinstance(p, (int, np.integer)) else stable_hash(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def seed_for(*parts) -> int:
    """A single 32-bit integer seed derived the same way as rng_for."""
    entropy = [p if isinstance(p, (int, np.integer)) else stable_hash(p) for p in parts]
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])

"""Named sub-streams derived from a single master seed.

Every source of randomness in the pipeline (data generation, parameter
init, batch shuffling, description sampling) draws from its own named
stream so that components can be reproduced in isolation and runs are
bit-identical given the same master seed.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np


def _digest(seed: int, *names: object) -> int:
    key = ":".join([str(seed)] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def derive_seed(seed: int, *names: object) -> int:
    """A child seed for a named component of the pipeline."""
    return _digest(seed, *names)


def substream(seed: int, *names: object) -> random.Random:
    """Stdlib RNG for a named sub-stream of ``seed``."""
    return random.Random(_digest(seed, *names))


def np_substream(seed: int, *names: object) -> np.random.Generator:
    """NumPy RNG for a named sub-stream of ``seed``."""
    return np.random.default_rng(_digest(seed, *names))


def stable_hash(*parts: object) -> str:
    """Short hex digest of the given parts, stable across processes."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return hashlib.blake2b(key, digest_size=8).hexdigest()

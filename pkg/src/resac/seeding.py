"""Named deterministic RNG streams.

Every stochastic component draws from its own stream derived from
(root seed, purpose tag), so adding draws to one component never
shifts the numbers another one sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stable_hash", "stream"]


def stable_hash(tag: str) -> int:
    """Platform- and run-stable 32-bit hash of a short string."""
    return int.from_bytes(hashlib.blake2s(tag.encode(), digest_size=4).digest(), "little")


def stream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Generator for the (seed, tag) stream; extra ints split it further."""
    return np.random.default_rng(np.random.SeedSequence([seed, stable_hash(tag), *extra]))

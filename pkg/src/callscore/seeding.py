"""Deterministic RNG substreams fanned out from one master seed.

Every stage that draws randomness names its stream, so experiments replay
bit-identically no matter which stages run or in what order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the (seed, names...) stream, independent of all others."""
    label = "/".join(str(n) for n in names)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))

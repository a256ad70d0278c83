"""Named, counter-based random streams.

Every stochastic component (weight init, voting masks, head dropout, data
shuffling, synthetic data) draws from its own Philox stream keyed by
(seed, name), so toggling one component never shifts the randomness seen
by another. Philox is counter-based, which also gives cheap disjoint
sub-streams when a caller wants to split work.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for the (seed, name) stream, positioned at 0."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def substream(seed: int, name: str, index: int) -> np.random.Generator:
    """A disjoint child of the (seed, name) stream, e.g. one per sample."""
    return stream(seed, f"{name}/{index}")

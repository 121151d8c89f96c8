"""Deterministic, purpose-keyed random streams.

All randomness in a run flows through streams derived from the scenario seed
plus a tuple of tags (purpose string, round index, device id, ...). Streams
with different tags are statistically independent, and the same (seed, tags)
always yields the same stream regardless of what else the run did -- this is
what keeps strategies paired on identical environment events.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    digest = hashlib.blake2b(repr(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a fresh generator for (seed, *tags)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))

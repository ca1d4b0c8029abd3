"""Named, seeded random substreams.

Every random draw in the package flows through a substream derived from
(base seed, stream name, optional counters).  Substreams keyed on the
instance id are independent of batch composition and scheduling order, so
augmentation results do not depend on how work is partitioned.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, str):
        return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return int(name)


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    """SeedSequence for the substream identified by (seed, *names)."""
    return np.random.SeedSequence([int(seed)] + [_key(n) for n in names])


def stream(seed: int, *names) -> np.random.Generator:
    """Fresh generator for the named substream."""
    return np.random.default_rng(seed_sequence(seed, *names))


class Substreams:
    """Factory of per-purpose, per-instance generators under one base seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *names) -> np.random.Generator:
        return stream(self.seed, *names)

    def for_instance(self, name: str, epoch: int, instance_id: int) -> np.random.Generator:
        """Counter-derived generator: depends only on (seed, name, epoch, id)."""
        return stream(self.seed, name, epoch, instance_id)

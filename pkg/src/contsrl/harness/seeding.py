"""Child seeds derived from a master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    return t if isinstance(t, int) else zlib.crc32(str(t).encode())


def child_seed(master: int, *tags) -> int:
    """Stable 63-bit seed for the stream named by ``tags``."""
    # SeedSequence ignores trailing zero words, so end with a nonzero length word
    # to keep (m, "a") and (m, "a", 0) apart
    ss = np.random.SeedSequence([int(master), *(_tag(t) for t in tags), len(tags) + 1])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def child_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *tags))

"""Split one master seed into named, order-independent random streams."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(master_seed: int, *names) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(master_seed, names...)``.

    ``stream(s, "bc", 2)`` is the same no matter which other streams were
    created before it, so adding a stage or a worker never perturbs the rest.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, *names) -> int:
    """A plain integer seed for APIs that want one (OPE seeds, eval seeds)."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(n) for n in names))
    return int(seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64))

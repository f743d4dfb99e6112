"""Counter-based random streams.

Every stochastic routine in the package draws from a Philox generator keyed
by (master seed, module tag) with the counter set from a block index.  Blocks
are the unit of work handed to workers, so results do not depend on how many
threads execute them or in which order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(seed: int, tag: str) -> tuple[int, int]:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(tag.encode("utf-8"))
    d = h.digest()
    return (
        int.from_bytes(d[:8], "little"),
        int.from_bytes(d[8:], "little"),
    )


def stream(seed: int, tag: str, block: int = 0, worker: int = 0) -> np.random.Generator:
    """Deterministic generator for (seed, tag, block, worker).

    Distinct blocks get disjoint counter ranges; the same tuple always
    reproduces the same draws regardless of thread count.
    """
    key = _key_words(seed, tag)
    # block/worker live in the high counter words: drawing advances the low
    # word, so streams from distinct blocks can never overlap.
    bg = np.random.Philox(counter=[0, 0, int(worker), int(block)], key=key)
    return np.random.Generator(bg)


def block_sizes(total: int, block: int) -> list[int]:
    """Split `total` samples into fixed-size blocks (last one ragged)."""
    if total <= 0:
        return []
    full, rem = divmod(total, block)
    out = [block] * full
    if rem:
        out.append(rem)
    return out

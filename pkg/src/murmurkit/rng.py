"""Named, splittable random streams.

Every source of randomness in the pipeline (fixture synthesis, parameter
init, shuffling, dropout masks, MC-dropout passes) draws from a stream
derived from a global seed plus a name path, so a single seed reproduces
an entire experiment and individual sites can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*tokens: int | str) -> int:
    """Hash a (seed, name, ...) path into a 128-bit Philox key."""
    h = hashlib.sha256()
    for tok in tokens:
        if isinstance(tok, int):
            h.update(b"i" + tok.to_bytes(16, "little", signed=True))
        else:
            h.update(b"s" + tok.encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:16], "little")


def stream(*tokens: int | str) -> np.random.Generator:
    """Counter-based generator for the given name path."""
    return np.random.Generator(np.random.Philox(key=derive_key(*tokens)))

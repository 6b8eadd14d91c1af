"""Deterministic seed derivation.

All randomness in the package flows through named streams derived from a
single integer seed, so that independent consumers (data sampling, noise
draws, parameter init) never share or race a global generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str | bytes) -> int:
    """Hash the given parts into a stable 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b" + part)
        else:
            h.update(repr(part).encode("utf-8"))
        h.update(b"|")
    return int.from_bytes(h.digest(), "little")


def np_rng(*parts: int | str | bytes) -> np.random.Generator:
    """Fresh numpy generator for the named stream."""
    return np.random.default_rng(derive_seed(*parts))

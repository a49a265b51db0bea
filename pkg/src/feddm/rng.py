"""Deterministic seed derivation for independent random streams.

Every stochastic component (selection, per-client training, noise draws,
evaluation) gets its own seed derived from the master seed and a label, so
runs replay bit-for-bit and concurrent work needs no shared RNG state.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    """Hash a tuple of ints/strings into a 64-bit seed, stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")

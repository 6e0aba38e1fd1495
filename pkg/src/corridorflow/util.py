"""Seed derivation helpers shared across modules."""
from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int = 0) -> int:
    """Derive an independent 64-bit child seed from (seed, index)."""
    z = (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def content_seed(base: int, payload: bytes) -> int:
    """Seed derived from a base seed and a byte payload.

    Stable across processes (unlike the builtin hash) so that the same
    payload always maps to the same stream for a given base.
    """
    digest = hashlib.blake2b(
        int(base).to_bytes(8, "little", signed=False) + payload, digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")

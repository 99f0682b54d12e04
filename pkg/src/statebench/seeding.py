"""Keyed seed derivation: one master seed fans out into independent streams.

Every derived value is a pure function of (master, *context) via SHA-256, so
runs are reproducible from the spec alone and no two roles share a stream.
"""

import hashlib


def _digest(master: int, context: tuple) -> bytes:
    text = "|".join(str(c) for c in (master, *context))
    return hashlib.sha256(text.encode()).digest()


def derive_seed(master: int, *context) -> int:
    """63-bit seed for numpy generators."""
    return int.from_bytes(_digest(master, context)[:8], "little") >> 1


def derive_key128(master: int, *context) -> int:
    """128-bit key for index permutations."""
    return int.from_bytes(_digest(master, context)[:16], "little")

"""Stable 64-bit hashing.

Python's builtin ``hash`` is salted per process, so everything that must be
reproducible across runs (subgraph vocabularies, per-function RNG seeding,
artifact checksums) goes through FNV-1a instead.
"""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: str | bytes) -> int:
    """FNV-1a hash of a string (encoded UTF-8) or byte sequence."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def seed_for(name: str, salt: int = 0) -> int:
    """Deterministic RNG seed derived from an identifier and a model seed."""
    return fnv1a64(name) ^ (salt & _MASK)

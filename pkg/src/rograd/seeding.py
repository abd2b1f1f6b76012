"""Deterministic seed derivation shared by attacks, training and the grid runner."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer; maps any integer to a 64-bit value."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _tag_constant(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(seed: int, *tags: object) -> int:
    """Mix ``seed`` with a sequence of tags (strings or numbers) into a new 64-bit seed."""
    x = splitmix64(int(seed) & _MASK64)
    for tag in tags:
        x = splitmix64(x ^ _tag_constant(repr(tag)))
    return x


def rng(seed: int, *tags: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))

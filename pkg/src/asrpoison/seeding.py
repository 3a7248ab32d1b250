"""Stable seed derivation so every RNG stream is a pure function of the base seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *parts) -> int:
    """Hash (base, parts...) into a 64-bit seed; stable across runs and platforms."""
    text = repr((int(base),) + tuple(parts)).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def rng_for(base: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *parts))

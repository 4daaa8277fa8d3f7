"""Stable seed derivation so every stochastic stage is reproducible."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash arbitrary labels (master seed, subject id, token id, ...) into a
    64-bit seed. Stable across runs and platforms, unlike hash()."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))

"""Deterministic random-stream derivation.

All randomness flows from one top-level seed. Sub-streams are derived by
hashing ``(seed, label)`` with SHA-256 and taking the first 8 bytes as a
little-endian unsigned integer. The scheme is platform-stable (no salted
``hash()``), and distinct labels give statistically independent streams.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Map a (seed, label) pair to a 64-bit stream seed."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """A fresh PCG64 generator for the (seed, label) stream."""
    return np.random.default_rng(derive_seed(seed, label))

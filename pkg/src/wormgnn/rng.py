"""Deterministic RNG streams derived from a master seed plus context keys.

Every stochastic choice in the package draws from a Generator produced
here, so distinct (permutation, fold, worm, ...) cells get independent
streams while whole runs stay bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_entropy(master_seed: int, *parts) -> list[int]:
    digest = hashlib.sha256()
    digest.update(str(int(master_seed)).encode())
    for part in parts:
        digest.update(b"\x1f")
        digest.update(str(part).encode())
    raw = digest.digest()
    return [int.from_bytes(raw[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(derive_entropy(master_seed, *parts)))

"""Deterministic seed derivation.

All randomness in a run flows from one user-supplied seed. Named substreams
are derived by hashing the stream name into extra SeedSequence entropy, so
corpus sampling, training, and eval never share or perturb each other's
streams and no global RNG state is used anywhere.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def child_seed(seed: int, name: str) -> int:
    """Derive a plain integer seed for code that takes one (e.g. samplers)."""
    return int(substream(seed, name).integers(0, 2**63 - 1))

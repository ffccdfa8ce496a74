import hashlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Derive an independent 64-bit seed from a global seed and cell coordinates.

    The keys are stringified and hashed with SHA256 together with the seed,
    so (seed, "exp1", "P3", 500) always maps to the same stream and
    neighbouring cells do not share one.
    """
    payload = "|".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Seeded numpy Generator for a cell; no keys means the seed as-is"""
    if keys:
        return np.random.default_rng(derive_seed(seed, *keys))
    return np.random.default_rng(int(seed))

"""Deterministic random streams.

All randomness in the package flows from one top-level seed. Independent
purposes (init / dropout / sampling / eval) get independent Philox streams
keyed by a hash of the seed plus stable labels, so adding a consumer never
shifts the draws of another. Philox is counter-based, hence identical
across platforms.
"""
import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Counter-based generator for (seed, *labels); split by appending labels."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("utf-8"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))

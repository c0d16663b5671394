"""Synthetic interaction generators with planted structure.

Used by the verification experiments: a learnable dataset has to push the
ranking metrics far above the sampled-negative null, and a parity-flipping
dataset makes the most recent slice misleading on purpose.

IDs are zero-padded so the dense re-index preserves numeric order: user k
gets index k, item k gets index k.
"""
from __future__ import annotations

import numpy as np

from . import dataset
from .rng import stream

SLICE_SPAN = 1000  # raw seconds per generated slice


def _emit(triplets, user, item, t):
    triplets.append((f"u{user:04d}", f"i{item:04d}", int(t)))


def _item_cluster(num_items: int, num_clusters: int) -> np.ndarray:
    return np.arange(num_items) % num_clusters


def clustered(num_users: int = 50, num_items: int = 50, num_slices: int = 6,
              num_clusters: int = 10, per_slice: int = 3, seed: int = 0,
              regular_gaps: bool = False):
    """Each user sticks to one item cluster in every slice.

    With ``regular_gaps`` all of a user's interactions in slice s happen at
    the same user-specific offset, so consecutive event gaps are exactly one
    slice length.
    """
    rng = stream(seed, "synthetic", "clustered")
    item_cluster = _item_cluster(num_items, num_clusters)
    user_cluster = rng.integers(0, num_clusters, size=num_users)
    offsets = rng.integers(100, SLICE_SPAN - 100, size=num_users)

    triplets = []
    for s in range(num_slices):
        base = s * SLICE_SPAN
        for u in range(num_users):
            pool = np.where(item_cluster == user_cluster[u])[0]
            picks = rng.choice(pool, size=min(per_slice, pool.size), replace=False)
            for i in picks:
                t = base + (offsets[u] if regular_gaps else rng.integers(0, SLICE_SPAN))
                _emit(triplets, u, int(i), t)
    # pin the span so slice boundaries land exactly on SLICE_SPAN multiples
    _emit(triplets, 0, int(np.where(item_cluster == user_cluster[0])[0][0]), 0)
    _emit(triplets, 1, int(np.where(item_cluster == user_cluster[1])[0][0]),
          num_slices * SLICE_SPAN - 1)
    log = dataset.from_triplets(triplets, min_interactions=1)
    return dataset.assign_slices(log, num_slices), user_cluster, item_cluster


def parity_flip(num_users: int = 50, num_items: int = 50, num_slices: int = 9,
                num_clusters: int = 10, per_slice: int = 3, seed: int = 0,
                num_background: int = 10):
    """Item popularity flips between even and odd slices, and the latest
    graph alone cannot identify the next slice's items.

    Clusters split into an even-phase and an odd-phase half, so half the
    catalog has traffic only in even slices and half only in odd ones. Each
    user owns two distinct clusters per phase and walks them with period 4
    (A0, B0, A1, B1, ...): seeing only the most recent slice leaves a
    coin-flip between the two clusters of the upcoming phase, while two
    slices further back settle it. Background users touch every item in
    every non-test slice so no candidate is identifiable just by being
    absent from the latest graph.
    """
    rng = stream(seed, "synthetic", "parity")
    item_cluster = _item_cluster(num_items, num_clusters)
    half = num_clusters // 2

    def two_distinct(lo, hi):
        first = rng.integers(lo, hi, size=num_users)
        second = lo + (first - lo + rng.integers(1, hi - lo, size=num_users)) % (hi - lo)
        return first, second

    a0, a1 = two_distinct(0, half)            # even-phase clusters
    b0, b1 = two_distinct(half, num_clusters)  # odd-phase clusters
    schedule = [a0, b0, a1, b1]

    triplets = []
    for s in range(num_slices):
        base = s * SLICE_SPAN
        owner = schedule[s % 4]
        for u in range(num_users):
            pool = np.where(item_cluster == owner[u])[0]
            picks = rng.choice(pool, size=min(per_slice, pool.size), replace=False)
            for i in picks:
                _emit(triplets, u, int(i), base + rng.integers(0, SLICE_SPAN))
        if s < num_slices - 1:  # keep the test slice purely structured
            for i in range(num_items):
                bg = num_users + int(rng.integers(0, num_background))
                _emit(triplets, bg, i, base + rng.integers(0, SLICE_SPAN))
    _emit(triplets, 0, int(np.where(item_cluster == a0[0])[0][0]), 0)
    _emit(triplets, 1, int(np.where(item_cluster == schedule[(num_slices - 1) % 4][1])[0][0]),
          num_slices * SLICE_SPAN - 1)
    log = dataset.from_triplets(triplets, min_interactions=1)
    return dataset.assign_slices(log, num_slices), schedule, item_cluster


def write_tsv(log: dataset.InteractionLog, path) -> None:
    """Dump a log back to the raw triplet format (for CLI round trips)."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(log.users, log.items, log.times):
            fh.write(f"u{u:04d}\ti{i:04d}\t{t}\n")
